"""Sufficient statistics: complete-data counts and expected counts from calibrated trees.

An event is an ordered tuple of ``(var, lag)`` pairs, lags relative to the
child slice t+1.  Its table has one axis per pair in that order, so the
family event ``(*parents, (child, 0))`` reshapes straight onto the CPT layout.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .inference import (SliceTrees, _marginalize, calibrate_slice_trees,
                        exact_family_counts, marginal_query)
from .model import MISSING, Dataset, Dbn, ModelError


def make_event(pairs) -> tuple[tuple[int, int], ...]:
    ev = tuple((int(v), int(l)) for v, l in pairs)
    if not ev:
        raise ModelError("event must be nonempty")
    if len(set(ev)) != len(ev):
        raise ModelError(f"event {ev} has repeated pairs")
    if any(l < 0 for _, l in ev):
        raise ModelError(f"event {ev} has a negative lag")
    return ev


def family_event(child: int, parents) -> tuple[tuple[int, int], ...]:
    return tuple((int(p[0]), int(p[1])) for p in parents) + ((int(child), 0),)


@dataclass(frozen=True)
class EssTable:
    event: tuple[tuple[int, int], ...]
    table: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.table.ravel()

    @property
    def total(self) -> float:
        return float(self.table.sum())

    def transpose_to(self, event) -> "EssTable":
        event = tuple(event)
        if event == self.event:
            return self
        perm = [self.event.index(p) for p in event]
        return EssTable(event, np.transpose(self.table, perm))

    def reduce(self, keep) -> "EssTable":
        """Sum out every pair not in ``keep``; axes follow ``keep``."""
        keep = tuple(keep)
        drop = tuple(i for i, p in enumerate(self.event) if p not in keep)
        t = self.table.sum(axis=drop) if drop else self.table
        rest = [p for p in self.event if p in keep]
        return EssTable(keep, np.transpose(t, [rest.index(p) for p in keep]))


def _child_range(length: int, event, first_child_slice: int) -> range:
    lo = max(first_child_slice, max(l for _, l in event))
    return range(lo, length)


def complete_counts(data, events, cards: Sequence[int] | None = None, hidden: Iterable[int] = (),
                    first_child_slice: int = 1) -> list[EssTable]:
    """Integer counts of each event over all transitions.

    ``data`` is a :class:`Dataset` (variable ids are its columns) or a list of
    int arrays with MISSING = -1 (then ``cards`` is required).  A transition is
    skipped for an event if any referenced slice is out of range or MISSING.
    """
    if isinstance(data, Dataset):
        seqs, cards = data.sequences, data.cards
    else:
        seqs = [np.asarray(s) for s in data]
        if cards is None:
            raise ModelError("cards are required for raw sequences")
    hidden = set(hidden)
    out = []
    for raw in events:
        event = make_event(raw)
        for v, _ in event:
            if v in hidden:
                raise ModelError(f"event {event} references hidden variable {v}")
            if not 0 <= v < len(cards):
                raise ModelError(f"event {event} references unknown variable {v}")
        shape = tuple(cards[v] for v, _ in event)
        size = int(np.prod(shape, dtype=np.int64))
        counts = np.zeros(size)
        for seq in seqs:
            rng_ = _child_range(len(seq), event, first_child_slice)
            if len(rng_) == 0:
                continue
            s = np.arange(rng_.start, rng_.stop)
            cols = [seq[s - lag, v] for v, lag in event]
            ok = np.ones(len(s), dtype=bool)
            for c in cols:
                ok &= c != MISSING
            if not ok.any():
                continue
            idx = np.ravel_multi_index(tuple(c[ok] for c in cols), shape)
            counts += np.bincount(idx, minlength=size)
        out.append(EssTable(event, counts.reshape(shape)))
    return out


def _as_tree_list(trees) -> list:
    if isinstance(trees, SliceTrees):
        return [trees]
    trees = list(trees)
    if trees and all(isinstance(t, SliceTrees) for t in trees):
        return trees
    return [trees]


def expected_family_counts(trees, families) -> list[EssTable]:
    """Sum clique marginals over all transitions (no product approximation).

    ``trees`` is a :class:`SliceTrees`, a list of them (one per sequence), or a
    plain list of calibrated trees.  Every family must fit inside one clique.
    """
    groups = _as_tree_list(trees)
    events = [make_event(f) for f in families]
    out = []
    for event in events:
        acc = None
        for g in groups:
            if isinstance(g, SliceTrees):
                tmpl = g.template
                nodes = [tmpl.node_of(p) for p in event]
                c = tmpl.containing_clique(nodes)
                sums = g.clique_sums()
                shape = tuple(tmpl.node_cards[v] for v in tmpl.cliques[c])
                part = _marginalize(sums[tmpl.pot_off[c]:tmpl.pot_off[c + 1]].reshape(shape),
                                    tmpl.cliques[c], nodes)
            else:
                part = sum(marginal_query(tr, event) for tr in g)
            acc = part if acc is None else acc + part
        out.append(EssTable(event, np.asarray(acc, dtype=float)))
    return out


def _slice_marginals(g: SliceTrees, var: int, lag: int, ts: np.ndarray, card: int) -> np.ndarray:
    # lag 0 / lag 1 come from tree t itself; older slices s = t+1-lag from tree s (its slice-t side)
    if lag == 0:
        return g.marg_t1[ts, var, :card]
    if lag == 1:
        return g.marg_t[ts, var, :card]
    return g.marg_t[ts + 1 - lag, var, :card]


def expected_event_counts_factored(trees, events, first_child_slice: int = 1) -> list[EssTable]:
    """Expected counts with each event's posterior approximated by a product of singleton marginals."""
    groups = _as_tree_list(trees)
    out = []
    for raw in events:
        event = make_event(raw)
        acc = None
        for g in groups:
            if not isinstance(g, SliceTrees):
                raise ModelError("factored counts need SliceTrees from calibrate_slice_trees")
            cards = g.template.var_cards
            L = len(g) + 1
            rng_ = _child_range(L, event, first_child_slice)
            shape = tuple(cards[v] for v, _ in event)
            if len(rng_) == 0:
                part = np.zeros(shape)
            else:
                ts = np.arange(rng_.start, rng_.stop) - 1
                ops = [_slice_marginals(g, v, lag, ts, cards[v]) for v, lag in event]
                letters = string.ascii_letters[:len(event)]
                spec = ",".join("z" + a for a in letters) + "->" + letters
                part = np.einsum(spec, *ops, optimize=len(event) > 2)
            acc = part if acc is None else acc + part
        out.append(EssTable(event, acc))
    return out


# ----------------------------------------------------------------------
# sources and batched collection
# ----------------------------------------------------------------------

class CompleteDataSource:
    """Counts from fully observed sequences (model variable order)."""

    def __init__(self, evidence, cards, hidden=(), first_child_slice: int = 1):
        self.evidence = [np.asarray(e) for e in evidence]
        self.cards = tuple(cards)
        self.hidden = tuple(hidden)
        self.first_child_slice = first_child_slice
        self.version = ("complete", id(self), first_child_slice)
        self.computed = 0
        self.passes = 0

    @classmethod
    def from_dataset(cls, dbn: Dbn, dataset: Dataset, first_child_slice: int = 1):
        return cls(dataset.evidence_for(dbn), dbn.cards, dbn.hidden_ids, first_child_slice)

    @property
    def num_transitions(self) -> int:
        return sum(max(0, len(e) - self.first_child_slice) for e in self.evidence)

    def compute(self, events) -> list[EssTable]:
        self.passes += 1
        self.computed += len(events)
        return complete_counts(self.evidence, events, self.cards, self.hidden, self.first_child_slice)


class ExpectedDataSource:
    """Expected counts under a fixed model, from one smoothing pass per sequence.

    Trees are calibrated lazily on first use and reused for every request.
    ``compute`` uses the product-of-marginals approximation for all events;
    ``family_counts`` reads exact clique marginals for families of the model.
    """

    def __init__(self, dbn: Dbn, evidence, partition=None, first_child_slice: int = 1, engine: str = "bk"):
        self.dbn = dbn
        self.evidence = [np.asarray(e) for e in evidence]
        self.partition = partition
        self.first_child_slice = first_child_slice
        self.engine = engine
        self.cards = dbn.cards
        self.version = ("expected", dbn.version, id(self), first_child_slice)
        self._trees = None
        self.log_likelihood = None
        self.computed = 0
        self.passes = 0

    @property
    def num_transitions(self) -> int:
        return sum(max(0, len(e) - self.first_child_slice) for e in self.evidence)

    @property
    def trees(self) -> list[SliceTrees]:
        if self._trees is None:
            trees, ll = [], 0.0
            for k, ev in enumerate(self.evidence):
                tr, l = calibrate_slice_trees(self.dbn, ev, self.partition, sequence_index=k)
                trees.append(tr)
                ll += l
            self._trees = trees
            self.log_likelihood = ll
        return self._trees

    def compute(self, events) -> list[EssTable]:
        self.passes += 1
        self.computed += len(events)
        return expected_event_counts_factored(self.trees, events, self.first_child_slice)

    def family_counts(self, families) -> list[EssTable]:
        if self.engine == "exact":
            return exact_expected_family_counts(self.dbn, self.evidence, families)[0]
        return expected_family_counts(self.trees, families)


def exact_expected_family_counts(dbn: Dbn, evidence, families):
    """Exact-inference family ESS summed over sequences.

    Returns ``(tables, loglik, transition_loglik)``; the last excludes slice-0 terms.
    """
    events = [make_event(f) for f in families]
    acc = None
    ll = ll_trans = 0.0
    for ev in evidence:
        tabs, l, logz = exact_family_counts(dbn, ev, events)
        ll += l
        ll_trans += float(logz[1:].sum())
        acc = tabs if acc is None else [a + b for a, b in zip(acc, tabs)]
    return [EssTable(e, t) for e, t in zip(events, acc)], ll, ll_trans


class StatisticsCache:
    """Event tables keyed by canonical (sorted) event, valid for one source version."""

    def __init__(self):
        self.version = None
        self.tables: dict = {}

    def clear(self):
        self.tables.clear()

    def __len__(self):
        return len(self.tables)


def canonical(event) -> tuple:
    return tuple(sorted(make_event(event)))


def batch_collect(requests, source, cache: StatisticsCache | None = None) -> list[EssTable]:
    """Serve requests from the cache, computing all misses in one call to the source."""
    if cache is None:
        cache = StatisticsCache()
    if cache.version != source.version:
        cache.clear()
        cache.version = source.version
    requests = [make_event(r) for r in requests]
    misses = []
    seen = set()
    for r in requests:
        key = canonical(r)
        if key not in cache.tables and key not in seen:
            seen.add(key)
            misses.append(key)
    if misses:
        for key, tab in zip(misses, source.compute(misses)):
            cache.tables[key] = tab
    return [cache.tables[canonical(r)].transpose_to(r) for r in requests]
