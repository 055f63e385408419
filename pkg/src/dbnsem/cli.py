"""Batch command-line interface.

Commands: ``generate``, ``learn-params``, ``learn-struct``, ``discover``,
``eval`` and ``infer``.  Exit status is 0 on success, 1 for usage errors, 2
for data errors, 3 for numeric failures (zero-probability evidence) and 4
for internal invariant failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .discover import DiscoveryConfig, discovery_pipeline, fhmm_baseline, subsample_dataset
from .inference import ClusterPartition, ZeroMassEvidence, calibrate_slice_trees
from .io import (atomic_write, canonical_json, encoding_from_dict, encoding_to_dict, ingest_csv, load_model,
                 save_model, split_dataset, write_csv)
from .learn import SearchConfig, holdout_bits_per_slice, parametric_em, structural_em
from .model import Dataset, Dbn, ModelError, TransitionStructure, estimate_prior, make_dbn, make_variables, \
    sample_trajectories

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3, 4

COMMANDS = ("generate", "learn-params", "learn-struct", "discover", "eval", "infer")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    model: str | None = None
    data: str | None = None
    test_data: str | None = None
    out: str | None = None
    seed: int = 0
    search: SearchConfig = SearchConfig()
    partition: str = "singletons"
    continuous: tuple[str, ...] = ()
    buckets: int = 7
    split: float = 0.7
    subsample: int = 1
    iterations: int = 2
    k: int = 3
    epsilon: float = 0.3
    rho: float = 0.5
    engine: str = "bk"
    num_sequences: int = 1
    length: int = 100
    include_hidden: bool = False
    fhmm: tuple[int, ...] = ()
    query: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if not 0 < self.split < 1:
            raise UsageError("--split must be in (0, 1)")
        if self.continuous and self.buckets < 2:
            raise UsageError("--buckets must be >= 2")
        if self.subsample < 1:
            raise UsageError("--subsample must be >= 1")


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------

def _r3(x):
    if x is None:
        return None
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return round(float(x), 3)


def emit_report(traces) -> tuple[str, dict]:
    """Rows of bits/slice per run label, one column per dataset.

    ``traces`` maps a dataset name to its records (each with ``iteration``
    and ``test_bits_per_slice``); a bare list counts as one dataset.
    Returns the rendered table and its JSON twin with the same 3-decimal values.
    """
    if not isinstance(traces, dict):
        traces = {"data": traces}
    if not traces or not any(traces.values()):
        raise ValueError("need at least one trace")
    datasets = list(traces)
    rows: list[str] = []
    cells: dict = {}
    for ds, recs in traces.items():
        for r in recs:
            label = _row_label(r["iteration"])
            if label not in rows:
                rows.append(label)
            cells[(label, ds)] = _r3(r.get("test_bits_per_slice"))
    rows.sort(key=_row_order)
    doc = {"columns": datasets, "unit": "bits/slice",
           "rows": [{"label": lab, "values": {ds: cells.get((lab, ds)) for ds in datasets}} for lab in rows]}
    width = max(len(r) for r in rows + ["run"])
    colw = [max(len(d), 8) for d in datasets]
    lines = ["  ".join(["run".ljust(width)] + [d.rjust(w) for d, w in zip(datasets, colw)])]
    for row in doc["rows"]:
        vals = []
        for ds, w in zip(datasets, colw):
            v = row["values"][ds]
            vals.append(("-" if v is None else v if isinstance(v, str) else f"{v:.3f}").rjust(w))
        lines.append("  ".join([row["label"].ljust(width)] + vals))
    return "\n".join(lines) + "\n", doc


def _row_label(it) -> str:
    if it == "baseline":
        return "fully observable only"
    if isinstance(it, int):
        return f"iteration {it}"
    return str(it)


def _row_order(label: str):
    if label.startswith("FHMM"):
        return (0, label)
    if label == "fully observable only":
        return (1, 0)
    if label.startswith("iteration "):
        return (2, int(label.split()[1]))
    return (3, label)


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dbnsem", description="Learn discrete dynamic Bayesian networks and discover hidden variables.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--model", help="model JSON (input for generate/eval/infer/learn-params)")
    p.add_argument("--data", help="training CSV")
    p.add_argument("--test-data", help="held-out CSV")
    p.add_argument("--out", help="output file, or directory for discover")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--score", choices=("bic", "bde"), default="bic")
    p.add_argument("--ess", type=float, default=1.0, help="BDe equivalent sample size")
    p.add_argument("--max-indegree", type=int, default=3)
    p.add_argument("--max-lag", type=int, default=1)
    p.add_argument("--partition", default="singletons",
                   help="'singletons', 'single', or a JSON file listing clusters of variable names")
    p.add_argument("--buckets", type=int, default=7)
    p.add_argument("--continuous", default="", help="comma-separated columns to discretize")
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--subsample", type=int, default=1)
    p.add_argument("--split", type=float, default=0.7, help="train fraction when --test-data is absent")
    p.add_argument("--k", type=int, default=3, help="window of the non-Markovian search")
    p.add_argument("--engine", choices=("bk", "exact"), default="bk")
    p.add_argument("--em-iterations", type=int, default=50)
    p.add_argument("--num-sequences", type=int, default=1)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--include-hidden", action="store_true")
    p.add_argument("--fhmm", default="", help="comma-separated hidden-chain counts for FHMM baselines")
    p.add_argument("--query", default="", help="comma-separated variables (all slices) or VAR@SLICE items")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_args(argv: Sequence[str]) -> RunConfig:
    a = build_parser().parse_args(list(argv))
    if a.verbose:
        logging.basicConfig(level=logging.INFO)
    try:
        search = SearchConfig(score=a.score, ess=a.ess, max_indegree=a.max_indegree, max_lag=a.max_lag,
                              seed=a.seed, em_max_iter=a.em_iterations)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    split = lambda s: tuple(x.strip() for x in s.split(",") if x.strip())  # noqa: E731
    try:
        fhmm = tuple(int(x) for x in split(a.fhmm))
    except ValueError:
        raise UsageError("--fhmm takes comma-separated integers") from None
    return RunConfig(a.command, a.model, a.data, a.test_data, a.out, a.seed, search, a.partition,
                     split(a.continuous), a.buckets, a.split, a.subsample, a.iterations, a.k, a.epsilon, a.rho,
                     a.engine, a.num_sequences, a.length, a.include_hidden, fhmm, split(a.query))


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def _need(cfg: RunConfig, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise UsageError(f"{cfg.command} requires --{n.replace('_', '-')}")


def _encoding_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".encoding.json")


def _load_partition(spec: str, dbn_names: Sequence[str]):
    if spec in ("singletons", "single"):
        return spec
    doc = json.loads(Path(spec).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ModelError(f"partition file {spec}: expected a list of clusters")
    index = {n: i for i, n in enumerate(dbn_names)}
    clusters = []
    for c in doc:
        try:
            clusters.append(tuple(sorted(index[n] for n in c)))
        except (KeyError, TypeError):
            raise ModelError(f"partition file {spec}: unknown variable in cluster {c!r}") from None
    covered = {v for c in clusters for v in c}
    # variables not mentioned (e.g. new memory variables) become singletons
    clusters += [(i,) for i in range(len(dbn_names)) if i not in covered]
    return ClusterPartition(tuple(clusters))


def _partition_for(cfg: RunConfig, dbn: Dbn):
    return _load_partition(cfg.partition, dbn.names)


def _ingest(cfg: RunConfig, path, encoding=None, model: Dbn | None = None) -> Dataset:
    cards = None
    if model is not None:
        cards = {v.name: v.cardinality for v in model.variables}
    ds = ingest_csv(path, cfg.continuous, cfg.buckets, encoding, cards)
    if cfg.subsample > 1:
        ds = subsample_dataset(ds, cfg.subsample)
    return ds


def _model_encoding(cfg: RunConfig):
    p = _encoding_path(cfg.model)
    if p.exists():
        return encoding_from_dict(json.loads(p.read_text(encoding="utf-8")))
    return None


def _save_with_encoding(dbn: Dbn, path, data: Dataset):
    save_model(dbn, path)
    if data.bin_edges or data.labels:
        atomic_write(_encoding_path(path), canonical_json(encoding_to_dict(data)) + "\n")


def _train_test(cfg: RunConfig, model: Dbn | None = None) -> tuple[Dataset, Dataset | None]:
    train = _ingest(cfg, cfg.data, model=model)
    if cfg.test_data:
        return train, _ingest(cfg, cfg.test_data, encoding=train, model=model)
    return train, None


def _emit_trace(trace, path):
    text = "".join(json.dumps({k: _jsonable(v) for k, v in rec.items()}, sort_keys=True) + "\n" for rec in trace)
    atomic_write(path, text)


def _dumps(doc) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n"


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def cmd_generate(cfg: RunConfig) -> int:
    _need(cfg, "model", "out")
    dbn = load_model(cfg.model)
    data = sample_trajectories(dbn, cfg.num_sequences, cfg.length, cfg.seed, cfg.include_hidden)
    write_csv(data, cfg.out)
    return EXIT_OK


def cmd_learn_params(cfg: RunConfig) -> int:
    _need(cfg, "model", "data", "out")
    dbn = load_model(cfg.model)
    train, test = _train_test(cfg, dbn)
    part = _partition_for(cfg, dbn)
    res = parametric_em(estimate_prior(dbn, train), train, part, cfg.search, engine=cfg.engine)
    _save_with_encoding(res.dbn, cfg.out, train)
    trace = list(res.trace)
    if test is not None:
        bits = holdout_bits_per_slice(res.dbn, test, part)
        trace.append({"phase": "eval", "iteration": None, "score": None, "bits_per_slice": bits})
        print(f"{bits:.4f} bits/slice")
    _emit_trace(trace, Path(cfg.out).with_suffix(".trace.jsonl"))
    return EXIT_OK


def cmd_learn_struct(cfg: RunConfig) -> int:
    _need(cfg, "data", "out")
    start = load_model(cfg.model) if cfg.model else None
    train, test = _train_test(cfg, start)
    if start is None:
        variables = make_variables(list(zip(train.names, train.cards)))
        start = make_dbn(variables, TransitionStructure.empty(len(variables), cfg.search.max_indegree))
    start = estimate_prior(start, train)
    part = _partition_for(cfg, start)
    res = structural_em(start, train, part, cfg.search)
    _save_with_encoding(res.dbn, cfg.out, train)
    trace = list(res.trace)
    if test is not None:
        bits = holdout_bits_per_slice(res.dbn, test, part)
        trace.append({"phase": "eval", "iteration": None, "score": None, "bits_per_slice": bits, "move": None})
        print(f"{bits:.4f} bits/slice")
    _emit_trace(trace, Path(cfg.out).with_suffix(".trace.jsonl"))
    return EXIT_OK


def cmd_discover(cfg: RunConfig) -> int:
    _need(cfg, "data", "out")
    train, test = _train_test(cfg)
    if test is None:
        train, test = split_dataset(train, cfg.split)
    if cfg.partition not in ("singletons", "single"):
        raise UsageError("discover adds variables during the run; use --partition singletons or single")
    dcfg = DiscoveryConfig(search=cfg.search, k=cfg.k, iterations=cfg.iterations, epsilon=cfg.epsilon,
                           rho=cfg.rho, partition=cfg.partition)
    result = discovery_pipeline(train, test, dcfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for rec, model in zip(result.records, result.models):
        name = f"model_{'baseline' if rec['iteration'] == 'baseline' else 'iter%d' % rec['iteration']}.json"
        _save_with_encoding(model, out / name, train)
        records.append(dict(rec, model_file=name))
    for h in cfg.fhmm:
        rec, model = fhmm_baseline(train, test, h, config=dcfg)
        name = f"model_fhmm{h}.json"
        _save_with_encoding(model, out / name, train)
        records.append(dict(rec, model_file=name))
    report = [_round_record(r) for r in records]
    text, table = emit_report({Path(cfg.data).stem: records})
    atomic_write(out / "report.json", _dumps({"iterations": report, "table": table}))
    atomic_write(out / "report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def _round_record(rec: dict) -> dict:
    out = {}
    for k, v in rec.items():
        if k == "non_markov_arcs":
            v = [dict(a, gain=_r3(a["gain"])) for a in v]
        elif isinstance(v, float):
            v = _r3(v)
        out[k] = v
    return out


def cmd_eval(cfg: RunConfig) -> int:
    _need(cfg, "model")
    dbn = load_model(cfg.model)
    path = cfg.test_data or cfg.data
    if path is None:
        raise UsageError("eval requires --data or --test-data")
    data = _ingest(cfg, path, _model_encoding(cfg), dbn)
    bits = holdout_bits_per_slice(dbn, data, _partition_for(cfg, dbn))
    if math.isinf(bits):
        raise ZeroMassEvidence(-1)
    line = f"{bits:.4f} bits/slice"
    print(line)
    if cfg.out:
        atomic_write(cfg.out, _dumps({"bits_per_slice": bits, "model": Path(cfg.model).name}))
    return EXIT_OK


def _parse_query(items, dbn: Dbn):
    out = []
    for item in items:
        name, sl = item, ""
        if item not in dbn.names:
            name, _, sl = item.rpartition("@")
        if name not in dbn.names or (sl and not sl.isdigit()):
            raise UsageError(f"unknown variable {name!r} in --query")
        out.append((dbn.index(name), int(sl) if sl else None))
    return out


def cmd_infer(cfg: RunConfig) -> int:
    _need(cfg, "model", "data")
    dbn = load_model(cfg.model)
    data = _ingest(cfg, cfg.data, _model_encoding(cfg), dbn)
    part = _partition_for(cfg, dbn)
    query = _parse_query(cfg.query or dbn.names, dbn)
    seqs = []
    for k, ev in enumerate(data.evidence_for(dbn)):
        trees, ll = calibrate_slice_trees(dbn, ev, part, sequence_index=k)
        L = len(ev)
        marg = {}
        for v, s in query:
            slices = range(L) if s is None else [s]
            for t in slices:
                if not 0 <= t < L:
                    raise UsageError(f"slice {t} out of range for sequence {k} of length {L}")
                row = trees.marg_t[t] if t < L - 1 else trees.marg_t1[L - 2]
                marg.setdefault(dbn.names[v], {})[str(t)] = [float(x) for x in row[v, :dbn.cards[v]]]
        seqs.append({"sequence": k, "log_likelihood": ll, "marginals": marg})
    text = _dumps({"model": Path(cfg.model).name, "sequences": seqs})
    if cfg.out:
        atomic_write(cfg.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


_DISPATCH = {"generate": cmd_generate, "learn-params": cmd_learn_params, "learn-struct": cmd_learn_struct,
             "discover": cmd_discover, "eval": cmd_eval, "infer": cmd_infer}


def run_command(cfg: RunConfig) -> int:
    try:
        return _DISPATCH[cfg.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ZeroMassEvidence as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant failures surface as a distinct status
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run_command(cfg)


if __name__ == "__main__":
    sys.exit(main())
