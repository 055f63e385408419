"""File formats: CSV datasets with discretization, canonical JSON model files, atomic writes."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (HIDDEN, MISSING, OBSERVABLE, Cpt, Dataset, Dbn, ModelError, ParentRef, TransitionStructure,
                    Variable, validate_dbn)


class DataFormatError(ModelError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ModelError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# ----------------------------------------------------------------------
# atomic writes
# ----------------------------------------------------------------------

def atomic_write(path, data: str | bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------
# canonical JSON
# ----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite number {x} cannot be serialized")
        s = "%.17g" % x
        if x == 0:
            s = "0"
        return s
    if x is None:
        return "null"
    if isinstance(x, str):
        return json.dumps(x, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def canonical_json(obj, indent: int = 0) -> str:
    """Sorted keys, 17-significant-digit floats, scalar arrays on one line."""
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad} {json.dumps(str(k), ensure_ascii=False)}: {canonical_json(obj[k], indent + 1)}'
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_fmt(v) for v in seq) + "]"
        items = [pad + " " + canonical_json(v, indent + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return _fmt(obj)


# ----------------------------------------------------------------------
# models
# ----------------------------------------------------------------------

def model_to_dict(dbn: Dbn) -> dict:
    return {
        "variables": [{"name": v.name, "cardinality": v.cardinality, "kind": v.kind} for v in dbn.variables],
        "window": dbn.window,
        "prior": [[list(map(float, row)) for row in p] for p in dbn.prior],
        "structure": [[{"variable": dbn.variables[p.var].name, "lag": p.lag} for p in fam]
                      for fam in dbn.structure.parents],
        "cpts": [list(map(float, c.table)) for c in dbn.cpts],
    }


def dumps_model(dbn: Dbn) -> str:
    return canonical_json(model_to_dict(dbn)) + "\n"


def save_model(dbn: Dbn, path) -> None:
    problems = validate_dbn(dbn)
    if problems:
        raise ModelError("refusing to save an invalid model: " + "; ".join(problems))
    atomic_write(path, dumps_model(dbn))


def _require(obj, key, kind, path):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(path, f"missing key {key!r}")
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise SchemaError(f"{path}.{key}", "expected an integer")
    if kind is not int and not isinstance(val, kind):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}")
    return val


def _numbers(val, path, length=None) -> np.ndarray:
    if not isinstance(val, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise SchemaError(path, "expected an array of numbers")
    if length is not None and len(val) != length:
        raise SchemaError(path, f"expected {length} entries, found {len(val)}")
    return np.array(val, dtype=float)


def model_from_dict(doc) -> Dbn:
    if not isinstance(doc, dict):
        raise SchemaError("$", "expected an object")
    extra = set(doc) - {"variables", "window", "prior", "structure", "cpts"}
    if extra:
        raise SchemaError("$", f"unknown keys {sorted(extra)}")
    raw_vars = _require(doc, "variables", list, "$")
    window = _require(doc, "window", int, "$")
    if window < 2:
        raise SchemaError("$.window", "must be >= 2")
    variables = []
    for i, v in enumerate(raw_vars):
        p = f"$.variables[{i}]"
        name = _require(v, "name", str, p)
        card = _require(v, "cardinality", int, p)
        kind = _require(v, "kind", str, p)
        if kind not in (OBSERVABLE, HIDDEN):
            raise SchemaError(f"{p}.kind", f"must be {OBSERVABLE!r} or {HIDDEN!r}")
        if card < 1:
            raise SchemaError(f"{p}.cardinality", "must be >= 1")
        variables.append(Variable(i, name, card, kind))
    names = {v.name: v.id for v in variables}
    if len(names) != len(variables):
        raise SchemaError("$.variables", "duplicate variable names")
    n = len(variables)
    cards = [v.cardinality for v in variables]

    raw_prior = _require(doc, "prior", list, "$")
    if len(raw_prior) != n:
        raise SchemaError("$.prior", f"expected {n} entries")
    prior = []
    for i, rows in enumerate(raw_prior):
        p = f"$.prior[{i}]"
        if not isinstance(rows, list) or len(rows) != window - 1:
            raise SchemaError(p, f"expected {window - 1} rows for variable {variables[i].name!r}")
        prior.append(np.stack([_numbers(r, f"{p}[{s}]", cards[i]) for s, r in enumerate(rows)]))

    raw_st = _require(doc, "structure", list, "$")
    if len(raw_st) != n:
        raise SchemaError("$.structure", f"expected {n} parent lists")
    fams = []
    for i, fam in enumerate(raw_st):
        p = f"$.structure[{i}]"
        if not isinstance(fam, list):
            raise SchemaError(p, "expected an array")
        refs = []
        for j, ref in enumerate(fam):
            q = f"{p}[{j}]"
            vname = _require(ref, "variable", str, q)
            lag = _require(ref, "lag", int, q)
            if vname not in names:
                raise SchemaError(f"{q}.variable", f"unknown variable {vname!r}")
            refs.append(ParentRef(names[vname], lag))
        fams.append(tuple(refs))
    indeg = max([len(f) for f in fams] + [1])
    structure = TransitionStructure(tuple(fams), max(4, indeg))

    raw_cpts = _require(doc, "cpts", list, "$")
    if len(raw_cpts) != n:
        raise SchemaError("$.cpts", f"expected {n} tables")
    cpts = []
    for i, tab in enumerate(raw_cpts):
        size = cards[i] * int(np.prod([cards[r.var] for r in fams[i]], dtype=np.int64))
        try:
            cpts.append(Cpt(i, fams[i], _numbers(tab, f"$.cpts[{i}]", size)))
        except SchemaError as exc:
            raise SchemaError(exc.path, f"CPT of {variables[i].name!r}: {str(exc).split(': ', 1)[1]}") from None
    dbn = Dbn(tuple(variables), tuple(prior), structure, tuple(cpts), window)
    problems = validate_dbn(dbn)
    if problems:
        raise ModelError("invalid model: " + "; ".join(problems))
    return dbn


def loads_model(text: str) -> Dbn:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return model_from_dict(doc)


def load_model(path) -> Dbn:
    return loads_model(Path(path).read_text(encoding="utf-8"))


# ----------------------------------------------------------------------
# CSV datasets
# ----------------------------------------------------------------------

def equal_frequency_edges(values: np.ndarray, buckets: int) -> list[float]:
    """Cut points at midpoints between the order statistics bounding each equal-count bucket."""
    if buckets < 2:
        raise ValueError("buckets must be >= 2")
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) < buckets:
        raise ModelError(f"{len(v)} values cannot fill {buckets} buckets")
    idx = [round(k * len(v) / buckets) for k in range(1, buckets)]
    return [float((v[i - 1] + v[i]) / 2) for i in idx]


def discretize(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    return np.searchsorted(np.asarray(edges), values, side="right")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def read_csv(path) -> tuple[list[str], list[list[tuple[int, list[str]]]]]:
    """Header and sequences of (line number, tokens); blank lines separate sequences."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(t.strip() for t in rows[0]):
        raise DataFormatError("missing header row", 1)
    header = [t.strip() for t in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise DataFormatError("header names must be unique and nonempty", 1)
    seqs, cur = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not t.strip() for t in row):
            if cur:
                seqs.append(cur)
                cur = []
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", lineno)
        cur.append((lineno, [t.strip() for t in row]))
    if cur:
        seqs.append(cur)
    return header, seqs


def ingest_csv(path, continuous: Sequence[str] = (), buckets: int = 7, encoding: Dataset | None = None,
               cards: dict | None = None) -> Dataset:
    """Parse a CSV of slices into a :class:`Dataset`.

    Columns named in ``continuous`` are cut into ``buckets`` equal-frequency
    bins; the edges are stored on the result.  Other numeric columns must
    hold value indices ``0..k-1``; symbolic columns are mapped through their
    sorted labels.  Passing a previously ingested dataset as ``encoding``
    reuses its edges and labels (held-out data must share the training
    encoding).  ``cards`` can widen cardinalities, e.g. to a model's.
    """
    header, seqs = read_csv(path)
    unknown = set(continuous) - set(header)
    if unknown:
        raise DataFormatError(f"continuous columns not in header: {sorted(unknown)}")
    m = len(header)
    cells = [[] for _ in range(m)]
    for seq in seqs:
        for lineno, toks in seq:
            for j, tok in enumerate(toks):
                if tok == "":
                    raise DataFormatError(f"empty value in column {header[j]!r} (use ? for missing)", lineno)
                cells[j].append((lineno, tok))
    edges_out, labels_out, card_out, columns = {}, {}, [], []
    for j, name in enumerate(header):
        present = [(ln, t) for ln, t in cells[j] if t != "?"]
        numeric = [(ln, _is_number(t)) for ln, t in present]
        kinds = {k for _, k in numeric}
        if len(kinds) > 1:
            first_sym = next(ln for ln, k in numeric if not k)
            first_num = next(ln for ln, k in numeric if k)
            raise DataFormatError(f"column {name!r} mixes numeric (line {first_num}) and symbolic values",
                                  max(first_sym, first_num))
        col = np.full(len(cells[j]), MISSING, dtype=np.int64)
        mask = np.array([t != "?" for _, t in cells[j]], dtype=bool)
        if name in continuous:
            if kinds == {False}:
                raise DataFormatError(f"continuous column {name!r} has symbolic values", present[0][0])
            vals = np.array([float(t) for _, t in present])
            edges = encoding.bin_edges[name] if encoding is not None and name in encoding.bin_edges \
                else equal_frequency_edges(vals, buckets)
            col[mask] = discretize(vals, edges)
            edges_out[name] = list(edges)
            card = len(edges) + 1
        elif kinds == {False}:
            known = list(encoding.labels.get(name, [])) if encoding is not None else []
            new = sorted({t for _, t in present} - set(known))
            if known and new:
                ln = next(ln for ln, t in present if t in new)
                raise DataFormatError(f"unknown token {new[0]!r} in column {name!r}", ln)
            labels = known or new
            index = {t: k for k, t in enumerate(labels)}
            col[mask] = [index[t] for _, t in present]
            labels_out[name] = labels
            card = len(labels)
        else:
            vals = []
            for ln, t in present:
                x = float(t)
                if x != int(x) or x < 0:
                    raise DataFormatError(f"unknown token {t!r} in discrete column {name!r} "
                                          "(expected a value index or declare the column continuous)", ln)
                vals.append(int(x))
            col[mask] = vals
            card = max(vals, default=0) + 1
        if encoding is not None and name in encoding.names:
            card = max(card, encoding.cards[encoding.names.index(name)])
        if cards and name in cards:
            if card > cards[name]:
                raise DataFormatError(f"column {name!r} has values beyond cardinality {cards[name]}")
            card = cards[name]
        card_out.append(max(card, 1))
        columns.append(col)
    data = np.stack(columns, axis=1) if columns else np.zeros((0, 0), dtype=np.int64)
    out, pos = [], 0
    for seq in seqs:
        if len(seq) < 2:
            raise DataFormatError("every sequence needs at least 2 slices", seq[0][0])
        out.append(data[pos:pos + len(seq)])
        pos += len(seq)
    if not out:
        raise DataFormatError("no data rows")
    return Dataset(tuple(header), tuple(card_out), out, edges_out, labels_out)


def dataset_to_csv(dataset: Dataset) -> str:
    lines = [",".join(dataset.names)]
    for k, seq in enumerate(dataset.sequences):
        if k:
            lines.append("")
        for row in seq:
            lines.append(",".join("?" if x == MISSING else str(int(x)) for x in row))
    return "\n".join(lines) + "\n"


def write_csv(dataset: Dataset, path) -> None:
    atomic_write(path, dataset_to_csv(dataset))


def encoding_to_dict(dataset: Dataset) -> dict:
    return {"bin_edges": {k: list(map(float, v)) for k, v in dataset.bin_edges.items()},
            "labels": {k: list(v) for k, v in dataset.labels.items()},
            "cardinalities": dict(zip(dataset.names, dataset.cards))}


def encoding_from_dict(doc: dict) -> Dataset:
    """An empty-shell dataset carrying only an encoding, for use with :func:`ingest_csv`."""
    names = tuple(doc.get("cardinalities", {}))
    cards = tuple(doc["cardinalities"][n] for n in names)
    shell = Dataset(names, cards, [np.zeros((2, len(names)), dtype=np.int64)], doc.get("bin_edges", {}),
                    doc.get("labels", {}))
    return shell


def split_dataset(dataset: Dataset, train_fraction: float = 0.7) -> tuple[Dataset, Dataset]:
    """Split by whole sequences; a single sequence is cut once in time instead."""
    if not 0 < train_fraction < 1:
        raise ValueError("train fraction must be in (0, 1)")
    seqs = dataset.sequences
    if len(seqs) >= 2:
        k = min(max(1, round(train_fraction * len(seqs))), len(seqs) - 1)
        return dataset.subset(range(k)), dataset.subset(range(k, len(seqs)))
    s = seqs[0]
    cut = min(max(2, round(train_fraction * len(s))), len(s) - 2)
    if cut < 2 or len(s) - cut < 2:
        raise ModelError("sequence too short to split")
    return dataset.with_sequences([s[:cut]]), dataset.with_sequences([s[cut:]])
