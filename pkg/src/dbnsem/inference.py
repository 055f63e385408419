"""Smoothing over a discrete DBN: factored (Boyen-Koller) message passing and a flat-state oracle.

Two-slice nodes are numbered ``i`` for ``X_i`` in slice t and ``n + i`` for
``X'_i`` in slice t+1.  Externally, nodes are addressed like parents, as
``(var, lag)`` pairs relative to the child slice: lag 0 is slice t+1 and
lag 1 is slice t.

All potentials are linear-space and renormalized every step; the log of each
step's normalizer is accumulated separately.  The per-step work (entering
messages and evidence, Hugin calibration, projection) runs in numba kernels
that loop over the whole sequence.
"""

from __future__ import annotations

import math
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .model import MISSING, Dbn, ModelError

counters = {"trees": 0}


class ZeroMassEvidence(ArithmeticError):
    """Evidence with probability zero under the (approximate) predictive distribution."""

    def __init__(self, slice_index: int, sequence_index: int | None = None):
        self.slice_index = slice_index
        self.sequence_index = sequence_index
        where = f"slice {slice_index}"
        if sequence_index is not None:
            where += f" of sequence {sequence_index}"
        super().__init__(f"evidence has zero probability at {where}")


class StateSpaceTooLarge(ValueError):
    pass


class NotInAnyClique(KeyError):
    pass


@dataclass(frozen=True)
class ClusterPartition:
    clusters: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(sorted(int(v) for v in c)) for c in self.clusters))

    @classmethod
    def singletons(cls, n: int) -> "ClusterPartition":
        return cls(tuple((i,) for i in range(n)))

    @classmethod
    def single(cls, n: int) -> "ClusterPartition":
        return cls((tuple(range(n)),))

    def check(self, n: int) -> None:
        seen = [v for c in self.clusters for v in c]
        if any(len(c) == 0 for c in self.clusters):
            raise ModelError("partition has an empty cluster")
        if sorted(seen) != list(range(n)):
            raise ModelError("partition clusters must be disjoint and cover all variables")


def resolve_partition(partition, n: int) -> ClusterPartition:
    if partition is None or partition == "singletons":
        return ClusterPartition.singletons(n)
    if partition == "single":
        return ClusterPartition.single(n)
    if not isinstance(partition, ClusterPartition):
        partition = ClusterPartition(tuple(partition))
    partition.check(n)
    return partition


@dataclass
class FactoredMessage:
    """Product of cluster marginals, with the accumulated log normalizer."""

    clusters: tuple[tuple[int, ...], ...]
    marginals: list[np.ndarray]
    log_norm: float = 0.0

    @classmethod
    def uniform(cls, partition: ClusterPartition, cards: Sequence[int]) -> "FactoredMessage":
        margs = []
        for c in partition.clusters:
            shape = tuple(cards[v] for v in c)
            margs.append(np.full(shape, 1.0 / int(np.prod(shape))))
        return cls(partition.clusters, margs, 0.0)

    def joint(self, cards: Sequence[int]) -> np.ndarray:
        """Expand to a dense table over all variables (small models only)."""
        n = len(cards)
        out = np.ones(tuple(cards))
        for c, m in zip(self.clusters, self.marginals):
            shape = [1] * n
            for v in c:
                shape[v] = cards[v]
            out = out * m.reshape(shape)
        return out


# ----------------------------------------------------------------------
# clique tree template
# ----------------------------------------------------------------------

def _index_map(nodes: Sequence[int], cards: Sequence[int], sub: Sequence[int]) -> np.ndarray:
    shape = [cards[v] for v in nodes]
    size = int(np.prod(shape, dtype=np.int64))
    if not sub:
        return np.zeros(size, dtype=np.int64)
    grid = np.indices(shape).reshape(len(shape), -1)
    pos = [list(nodes).index(v) for v in sub]
    return np.ravel_multi_index(tuple(grid[pos]), [cards[v] for v in sub]).astype(np.int64)


def _triangulate(num_nodes: int, edges: set) -> list[tuple[int, ...]]:
    """Min-fill elimination with lowest-node tie-breaking; returns maximal cliques."""
    adj = {v: set() for v in range(num_nodes)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    remaining = set(range(num_nodes))
    cliques: list[frozenset] = []
    while remaining:
        best = None
        for v in sorted(remaining):
            nb = sorted(adj[v] & remaining)
            fill = sum(1 for x in range(len(nb)) for y in range(x + 1, len(nb)) if nb[y] not in adj[nb[x]])
            if best is None or fill < best[0]:
                best = (fill, v)
        v = best[1]
        nb = adj[v] & remaining
        for a in nb:
            for b in nb:
                if a != b:
                    adj[a].add(b)
        cliques.append(frozenset(nb | {v}))
        remaining.discard(v)
    maximal = []
    for c in cliques:
        if not any(c < d for d in cliques) and c not in maximal:
            maximal.append(c)
    return [tuple(sorted(c)) for c in maximal]


class CliqueTreeTemplate:
    """Two-slice clique tree for one structure and partition, plus flat kernel layout.

    Every family ``{X'_i} u Pa(X'_i)`` and every cluster on either side is
    contained in some clique.  Immutable once built.
    """

    def __init__(self, n: int, cards: Sequence[int], parents, partition: ClusterPartition):
        self.n = n
        self.var_cards = tuple(int(c) for c in cards)
        self.node_cards = self.var_cards + self.var_cards
        self.partition = partition
        self.parents = tuple(tuple(fam) for fam in parents)
        nc = self.node_cards

        families = []
        edges = set()
        for i, fam in enumerate(self.parents):
            nodes = [n + i]
            for p in fam:
                if p.lag not in (0, 1):
                    raise ModelError("clique trees need a Markovian (window 2) model")
                nodes.append(p.var + (n if p.lag == 0 else 0))
            families.append(tuple(nodes))
            edges.update((a, b) for a in nodes for b in nodes if a < b)
        for c in partition.clusters:
            for side in (0, n):
                nodes = [v + side for v in c]
                edges.update((a, b) for a in nodes for b in nodes if a < b)
        cliques = _triangulate(2 * n, edges)
        self.cliques = cliques
        self.families = families

        # maximum-weight spanning tree over sepset sizes, zero-weight links join components
        cand = []
        for a in range(len(cliques)):
            for b in range(a + 1, len(cliques)):
                w = len(set(cliques[a]) & set(cliques[b]))
                cand.append((-w, a, b))
        cand.sort()
        parent_uf = list(range(len(cliques)))

        def find(x):
            while parent_uf[x] != x:
                parent_uf[x] = parent_uf[parent_uf[x]]
                x = parent_uf[x]
            return x

        tree_edges = []
        for _, a, b in cand:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent_uf[ra] = rb
                tree_edges.append((a, b, tuple(sorted(set(cliques[a]) & set(cliques[b])))))
        self.tree_edges = tree_edges

        def smallest_containing(nodes):
            s = set(nodes)
            best = None
            for idx, c in enumerate(cliques):
                if s <= set(c) and (best is None or len(c) < len(cliques[best])):
                    best = idx
            assert best is not None, f"nodes {nodes} not covered by any clique"
            return best

        self._smallest_containing = smallest_containing
        self.family_clique = [smallest_containing(f) for f in families]
        self.alpha_clique = [smallest_containing(c) for c in partition.clusters]
        self.beta_clique = [smallest_containing([v + n for v in c]) for c in partition.clusters]
        self.node_clique = [smallest_containing([v]) for v in range(2 * n)]

        # BFS schedule from clique 0
        nbrs = {i: [] for i in range(len(cliques))}
        for e, (a, b, _) in enumerate(tree_edges):
            nbrs[a].append((b, e))
            nbrs[b].append((a, e))
        order, parent_of, seen = [0], {0: (None, None)}, {0}
        q = 0
        while q < len(order):
            c = order[q]
            q += 1
            for d, e in sorted(nbrs[c]):
                if d not in seen:
                    seen.add(d)
                    parent_of[d] = (c, e)
                    order.append(d)
        # collect edges in reverse BFS order (leaves first)
        sched = [(c, parent_of[c][0], parent_of[c][1]) for c in reversed(order[1:])]

        # flat layout
        sizes = [int(np.prod([nc[v] for v in c], dtype=np.int64)) for c in cliques]
        self.pot_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        maps: list[np.ndarray] = []
        map_len = [0]

        def add_map(m):
            off = map_len[0]
            maps.append(m)
            map_len[0] += len(m)
            return off

        e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap = [], [], [], [], [], []
        sep_total = 0
        for child, par, e in sched:
            sep = tree_edges[e][2]
            ssize = int(np.prod([nc[v] for v in sep], dtype=np.int64))
            e_child.append(child)
            e_parent.append(par)
            e_sep_off.append(sep_total)
            e_sep_size.append(ssize)
            e_cmap.append(add_map(_index_map(cliques[child], nc, sep)))
            e_pmap.append(add_map(_index_map(cliques[par], nc, sep)))
            sep_total += ssize
        self.e_child = np.array(e_child, dtype=np.int64)
        self.e_parent = np.array(e_parent, dtype=np.int64)
        self.e_sep_off = np.array(e_sep_off, dtype=np.int64)
        self.e_sep_size = np.array(e_sep_size, dtype=np.int64)
        self.e_cmap = np.array(e_cmap, dtype=np.int64)
        self.e_pmap = np.array(e_pmap, dtype=np.int64)
        self.sep_total = max(sep_total, 1)

        csizes = [int(np.prod([self.var_cards[v] for v in c], dtype=np.int64)) for c in partition.clusters]
        self.cl_off = np.concatenate([[0], np.cumsum(csizes)]).astype(np.int64)
        self.a_clq = np.array(self.alpha_clique, dtype=np.int64)
        self.b_clq = np.array(self.beta_clique, dtype=np.int64)
        self.a_map = np.array([add_map(_index_map(cliques[self.alpha_clique[k]], nc, list(c)))
                               for k, c in enumerate(partition.clusters)], dtype=np.int64)
        self.b_map = np.array([add_map(_index_map(cliques[self.beta_clique[k]], nc, [v + n for v in c]))
                               for k, c in enumerate(partition.clusters)], dtype=np.int64)
        self.nd_clq = np.array(self.node_clique, dtype=np.int64)
        self.nd_map = np.array([add_map(_index_map(cliques[self.node_clique[v]], nc, [v]))
                                for v in range(2 * n)], dtype=np.int64)
        self.f_map = [(_index_map(cliques[self.family_clique[i]], nc, families[i][1:] + families[i][:1]))
                      for i in range(n)]
        self.maps = np.concatenate(maps).astype(np.int64) if maps else np.zeros(1, dtype=np.int64)
        self.max_card = max(self.var_cards)

    @property
    def num_cliques(self) -> int:
        return len(self.cliques)

    def clique_nodes(self, idx: int) -> tuple[int, ...]:
        return self.cliques[idx]

    def node_of(self, ref) -> int:
        var, lag = ref
        if lag not in (0, 1):
            raise NotInAnyClique(f"lag {lag} is not inside a two-slice tree")
        return var + (self.n if lag == 0 else 0)

    def containing_clique(self, nodes) -> int:
        s = set(nodes)
        best = None
        for idx, c in enumerate(self.cliques):
            if s <= set(c) and (best is None or len(c) < len(self.cliques[best])):
                best = idx
        if best is None:
            raise NotInAnyClique(f"nodes {sorted(s)} are not jointly contained in any clique")
        return best

    def check_running_intersection(self) -> bool:
        """Every node's containing cliques form a connected subtree."""
        for v in range(2 * self.n):
            holders = {i for i, c in enumerate(self.cliques) if v in c}
            if not holders:
                return False
            start = min(holders)
            seen, stack = {start}, [start]
            while stack:
                c = stack.pop()
                for a, b, _ in self.tree_edges:
                    for x, y in ((a, b), (b, a)):
                        if x == c and y in holders and y not in seen:
                            seen.add(y)
                            stack.append(y)
            if seen != holders:
                return False
        return True

    def base_potential(self, dbn: Dbn) -> np.ndarray:
        """Product of the transition CPTs, each entered into its family clique."""
        base = np.ones(int(self.pot_off[-1]))
        for i, cpt in enumerate(dbn.cpts):
            c = self.family_clique[i]
            lo, hi = self.pot_off[c], self.pot_off[c + 1]
            base[lo:hi] *= cpt.table[self.f_map[i]]
        return base


_template_cache: dict = {}


def build_clique_tree(dbn: Dbn, partition=None) -> CliqueTreeTemplate:
    """Clique tree over slices t and t+1 covering every family and every cluster on both sides."""
    if dbn.window != 2 or dbn.structure.max_lag > 1:
        raise ModelError("clique trees need a Markovian (window 2) model")
    partition = resolve_partition(partition, dbn.n)
    key = (dbn.cards, dbn.structure.parents, partition.clusters)
    tmpl = _template_cache.get(key)
    if tmpl is None:
        tmpl = CliqueTreeTemplate(dbn.n, dbn.cards, dbn.structure.parents, partition)
        if len(_template_cache) > 256:
            _template_cache.clear()
        _template_cache[key] = tmpl
    return tmpl


# ----------------------------------------------------------------------
# numba kernels
# ----------------------------------------------------------------------

@numba.njit(cache=True)
def _calibrate(pot, pot_off, sep, sep2, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap, maps):
    m = e_child.shape[0]
    for j in range(m):
        c = e_child[j]
        p = e_parent[j]
        so = e_sep_off[j]
        for q in range(e_sep_size[j]):
            sep[so + q] = 0.0
        cm = e_cmap[j]
        base = pot_off[c]
        for x in range(pot_off[c + 1] - base):
            sep[so + maps[cm + x]] += pot[base + x]
        pm = e_pmap[j]
        base = pot_off[p]
        for x in range(pot_off[p + 1] - base):
            pot[base + x] *= sep[so + maps[pm + x]]
    for j in range(m - 1, -1, -1):
        c = e_child[j]
        p = e_parent[j]
        so = e_sep_off[j]
        for q in range(e_sep_size[j]):
            sep2[so + q] = 0.0
        pm = e_pmap[j]
        base = pot_off[p]
        for x in range(pot_off[p + 1] - base):
            sep2[so + maps[pm + x]] += pot[base + x]
        cm = e_cmap[j]
        base = pot_off[c]
        for x in range(pot_off[c + 1] - base):
            old = sep[so + maps[cm + x]]
            if old > 0.0:
                pot[base + x] *= sep2[so + maps[cm + x]] / old
            else:
                pot[base + x] = 0.0
        for q in range(e_sep_size[j]):
            sep[so + q] = sep2[so + q]


@numba.njit(cache=True)
def _enter_message(pot, pot_off, clq, mp, cl_off, maps, msg):
    for k in range(clq.shape[0]):
        c = clq[k]
        base = pot_off[c]
        off = mp[k]
        co = cl_off[k]
        for x in range(pot_off[c + 1] - base):
            pot[base + x] *= msg[co + maps[off + x]]


@numba.njit(cache=True)
def _enter_evidence(pot, pot_off, nd_clq, nd_map, maps, n, row):
    for i in range(n):
        v = row[i]
        if v < 0:
            continue
        c = nd_clq[n + i]
        base = pot_off[c]
        off = nd_map[n + i]
        for x in range(pot_off[c + 1] - base):
            if maps[off + x] != v:
                pot[base + x] = 0.0


@numba.njit(cache=True)
def _project(pot, pot_off, clq, mp, cl_off, maps, out):
    for k in range(clq.shape[0]):
        c = clq[k]
        base = pot_off[c]
        off = mp[k]
        co = cl_off[k]
        size = cl_off[k + 1] - co
        for q in range(size):
            out[co + q] = 0.0
        for x in range(pot_off[c + 1] - base):
            out[co + maps[off + x]] += pot[base + x]
        s = 0.0
        for q in range(size):
            s += out[co + q]
        if s > 0.0:
            for q in range(size):
                out[co + q] /= s


@numba.njit(cache=True)
def _clique_mass(pot, pot_off, c):
    s = 0.0
    for x in range(pot_off[c], pot_off[c + 1]):
        s += pot[x]
    return s


@numba.njit(cache=True)
def _forward_kernel(base, pot_off, sep_total, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap,
                    maps, cl_off, a_clq, a_map, b_clq, b_map, nd_clq, nd_map, n, ev, alpha, logz):
    pot = np.empty_like(base)
    sep = np.zeros(sep_total)
    sep2 = np.zeros(sep_total)
    for t in range(ev.shape[0] - 1):
        pot[:] = base
        _enter_message(pot, pot_off, a_clq, a_map, cl_off, maps, alpha[t])
        _enter_evidence(pot, pot_off, nd_clq, nd_map, maps, n, ev[t + 1])
        _calibrate(pot, pot_off, sep, sep2, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap, maps)
        z = _clique_mass(pot, pot_off, 0)
        if not z > 0.0:
            return t + 1
        logz[t + 1] = np.log(z)
        _project(pot, pot_off, b_clq, b_map, cl_off, maps, alpha[t + 1])
    return -1


@numba.njit(cache=True)
def _backward_kernel(base, pot_off, sep_total, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap,
                     maps, cl_off, a_clq, a_map, b_clq, b_map, nd_clq, nd_map, n, ev, beta):
    pot = np.empty_like(base)
    sep = np.zeros(sep_total)
    sep2 = np.zeros(sep_total)
    for t in range(ev.shape[0] - 2, -1, -1):
        pot[:] = base
        _enter_message(pot, pot_off, b_clq, b_map, cl_off, maps, beta[t + 1])
        _enter_evidence(pot, pot_off, nd_clq, nd_map, maps, n, ev[t + 1])
        _calibrate(pot, pot_off, sep, sep2, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap, maps)
        z = _clique_mass(pot, pot_off, 0)
        if not z > 0.0:
            return t + 1
        _project(pot, pot_off, a_clq, a_map, cl_off, maps, beta[t])
    return -1


@numba.njit(cache=True)
def _smooth_kernel(base, pot_off, sep_total, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap,
                   maps, cl_off, a_clq, a_map, b_clq, b_map, nd_clq, nd_map, n, ev, alpha, beta,
                   post, marg_t, marg_t1):
    pot = np.empty_like(base)
    sep = np.zeros(sep_total)
    sep2 = np.zeros(sep_total)
    nc = pot_off.shape[0] - 1
    for t in range(ev.shape[0] - 1):
        pot[:] = base
        _enter_message(pot, pot_off, a_clq, a_map, cl_off, maps, alpha[t])
        _enter_message(pot, pot_off, b_clq, b_map, cl_off, maps, beta[t + 1])
        _enter_evidence(pot, pot_off, nd_clq, nd_map, maps, n, ev[t + 1])
        _calibrate(pot, pot_off, sep, sep2, e_child, e_parent, e_sep_off, e_sep_size, e_cmap, e_pmap, maps)
        for c in range(nc):
            z = _clique_mass(pot, pot_off, c)
            if not z > 0.0:
                return t + 1
            for x in range(pot_off[c], pot_off[c + 1]):
                post[t, x] = pot[x] / z
        for v in range(2 * n):
            c = nd_clq[v]
            off = nd_map[v]
            b = pot_off[c]
            if v < n:
                for x in range(pot_off[c + 1] - b):
                    marg_t[t, v, maps[off + x]] += post[t, b + x]
            else:
                for x in range(pot_off[c + 1] - b):
                    marg_t1[t, v - n, maps[off + x]] += post[t, b + x]
    return -1


def _kernel_args(tmpl: CliqueTreeTemplate, base: np.ndarray):
    return (base, tmpl.pot_off, tmpl.sep_total, tmpl.e_child, tmpl.e_parent, tmpl.e_sep_off,
            tmpl.e_sep_size, tmpl.e_cmap, tmpl.e_pmap, tmpl.maps, tmpl.cl_off, tmpl.a_clq, tmpl.a_map,
            tmpl.b_clq, tmpl.b_map, tmpl.nd_clq, tmpl.nd_map, tmpl.n)


def _flatten_message(msg: FactoredMessage, tmpl: CliqueTreeTemplate) -> np.ndarray:
    if tuple(msg.clusters) != tmpl.partition.clusters:
        raise ModelError("message clusters do not match the tree's partition")
    return np.concatenate([np.asarray(m, dtype=float).ravel() for m in msg.marginals])


def _unflatten(flat: np.ndarray, tmpl: CliqueTreeTemplate) -> list[np.ndarray]:
    out = []
    for k, c in enumerate(tmpl.partition.clusters):
        shape = tuple(tmpl.var_cards[v] for v in c)
        out.append(flat[tmpl.cl_off[k]:tmpl.cl_off[k + 1]].reshape(shape).copy())
    return out


def _evidence_row(evidence, n: int) -> np.ndarray:
    if evidence is None:
        return np.full(n, MISSING, dtype=np.int64)
    if isinstance(evidence, dict):
        row = np.full(n, MISSING, dtype=np.int64)
        for k, v in evidence.items():
            row[int(k)] = int(v)
        return row
    return np.asarray(evidence, dtype=np.int64).reshape(n)


def initial_message(dbn: Dbn, tmpl: CliqueTreeTemplate, row: np.ndarray) -> tuple[np.ndarray, float]:
    """Slice-0 prior conditioned on its evidence, as a flat cluster message, plus its log mass."""
    flat = np.empty(int(tmpl.cl_off[-1]))
    logmass = 0.0
    for k, c in enumerate(tmpl.partition.clusters):
        table = np.ones(())
        for v in c:
            p = np.array(dbn.prior[v][0], dtype=float)
            if row[v] != MISSING:
                mask = np.zeros_like(p)
                mask[row[v]] = 1.0
                p = p * mask
            table = np.multiply.outer(table, p)
        z = table.sum()
        if not z > 0:
            raise ZeroMassEvidence(0)
        logmass += math.log(z)
        flat[tmpl.cl_off[k]:tmpl.cl_off[k + 1]] = (table / z).ravel()
    return flat, logmass


def forward_step(dbn: Dbn, tmpl: CliqueTreeTemplate, alpha: FactoredMessage, evidence=None) -> FactoredMessage:
    """Propagate a factored forward message one slice, conditioning on evidence at t+1."""
    row = _evidence_row(evidence, dbn.n)
    ev = np.vstack([np.full(dbn.n, MISSING, dtype=np.int64), row])
    buf = np.zeros((2, int(tmpl.cl_off[-1])))
    buf[0] = _flatten_message(alpha, tmpl)
    logz = np.zeros(2)
    bad = _forward_kernel(*_kernel_args(tmpl, tmpl.base_potential(dbn)), ev, buf, logz)
    if bad >= 0:
        raise ZeroMassEvidence(bad)
    return FactoredMessage(tmpl.partition.clusters, _unflatten(buf[1], tmpl), alpha.log_norm + logz[1])


def backward_step(dbn: Dbn, tmpl: CliqueTreeTemplate, beta: FactoredMessage, evidence=None) -> FactoredMessage:
    """Propagate a factored backward message from t+1 to t; evidence is that of slice t+1."""
    row = _evidence_row(evidence, dbn.n)
    ev = np.vstack([np.full(dbn.n, MISSING, dtype=np.int64), row])
    buf = np.zeros((2, int(tmpl.cl_off[-1])))
    buf[1] = _flatten_message(beta, tmpl)
    bad = _backward_kernel(*_kernel_args(tmpl, tmpl.base_potential(dbn)), ev, buf)
    if bad >= 0:
        raise ZeroMassEvidence(bad)
    return FactoredMessage(tmpl.partition.clusters, _unflatten(buf[0], tmpl), beta.log_norm)


# ----------------------------------------------------------------------
# calibrated trees
# ----------------------------------------------------------------------

class CalibratedSliceTree:
    """Posterior clique potentials of one two-slice tree (each clique sums to 1)."""

    calibrated = True

    def __init__(self, template: CliqueTreeTemplate, flat: np.ndarray, log_likelihood: float):
        self.template = template
        self._flat = flat
        self.log_likelihood = log_likelihood

    def potential(self, idx: int) -> np.ndarray:
        t = self.template
        shape = tuple(t.node_cards[v] for v in t.cliques[idx])
        return self._flat[t.pot_off[idx]:t.pot_off[idx + 1]].reshape(shape)

    @property
    def potentials(self) -> list[np.ndarray]:
        return [self.potential(i) for i in range(self.template.num_cliques)]

    def sepset_disagreement(self) -> float:
        """Largest sepset-marginal mismatch between neighbouring cliques."""
        worst = 0.0
        t = self.template
        for a, b, sep in t.tree_edges:
            ma = _marginalize(self.potential(a), t.cliques[a], sep)
            mb = _marginalize(self.potential(b), t.cliques[b], sep)
            worst = max(worst, float(np.max(np.abs(ma - mb))))
        return worst


def _marginalize(table: np.ndarray, nodes: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    nodes = list(nodes)
    drop = tuple(i for i, v in enumerate(nodes) if v not in keep)
    m = table.sum(axis=drop) if drop else table
    remaining = [v for v in nodes if v in keep]
    return np.transpose(m, [remaining.index(v) for v in keep]) if keep else np.asarray(m)


def marginal_query(tree: CalibratedSliceTree, variables) -> np.ndarray:
    """Normalized joint marginal over ``(var, lag)`` refs sharing a clique, axes in request order."""
    tmpl = tree.template
    nodes = [tmpl.node_of(r) for r in variables]
    idx = tmpl.containing_clique(nodes)
    m = _marginalize(tree.potential(idx), tmpl.cliques[idx], nodes)
    return m / m.sum()


class SliceTrees(SequenceABC):
    """Calibrated trees for every transition of one sequence, stored flat.

    Indexing yields :class:`CalibratedSliceTree` views.  ``marg_t[t, i]`` and
    ``marg_t1[t, i]`` are the singleton posteriors of ``X_i`` read from tree t
    on its slice-t and slice-(t+1) side respectively.
    """

    def __init__(self, template, posteriors, marg_t, marg_t1, logz, log_likelihood, evidence):
        self.template = template
        self.posteriors = posteriors
        self.marg_t = marg_t
        self.marg_t1 = marg_t1
        self.logz = logz
        self.log_likelihood = log_likelihood
        self.evidence = evidence
        self._clique_sums = None

    def __len__(self):
        return self.posteriors.shape[0]

    def __getitem__(self, t):
        if isinstance(t, slice):
            return [self[i] for i in range(*t.indices(len(self)))]
        if t < 0:
            t += len(self)
        return CalibratedSliceTree(self.template, self.posteriors[t], float(self.logz[t + 1]))

    @property
    def transition_log_likelihood(self) -> float:
        """Sum of per-transition log normalizers (excludes the slice-0 prior term)."""
        return float(self.logz[1:].sum())

    def clique_sums(self) -> np.ndarray:
        if self._clique_sums is None:
            self._clique_sums = self.posteriors.sum(axis=0)
        return self._clique_sums


def calibrate_slice_trees(dbn: Dbn, sequence, partition=None, sequence_index: int | None = None):
    """Forward pass, backward pass, then one calibrated tree per transition.

    ``sequence`` is an evidence array of shape ``(length, dbn.n)`` in model
    variable order with MISSING for unobserved cells.  Returns ``(trees, loglik)``
    where ``trees`` is a :class:`SliceTrees` and ``loglik`` accumulates the
    forward normalizers including the slice-0 term.
    """
    ev = np.ascontiguousarray(sequence, dtype=np.int64)
    if ev.ndim != 2 or ev.shape[1] != dbn.n or len(ev) < 2:
        raise ModelError("sequence must be an int array of shape (length >= 2, n)")
    tmpl = build_clique_tree(dbn, partition)
    base = tmpl.base_potential(dbn)
    args = _kernel_args(tmpl, base)
    L = len(ev)
    A = int(tmpl.cl_off[-1])
    alpha = np.zeros((L, A))
    try:
        alpha[0], log0 = initial_message(dbn, tmpl, ev[0])
    except ZeroMassEvidence:
        raise ZeroMassEvidence(0, sequence_index) from None
    logz = np.zeros(L)
    logz[0] = log0
    bad = _forward_kernel(*args, ev, alpha, logz)
    if bad >= 0:
        raise ZeroMassEvidence(bad, sequence_index)
    beta = np.zeros((L, A))
    for k, c in enumerate(tmpl.partition.clusters):
        size = tmpl.cl_off[k + 1] - tmpl.cl_off[k]
        beta[L - 1, tmpl.cl_off[k]:tmpl.cl_off[k + 1]] = 1.0 / size
    bad = _backward_kernel(*args, ev, beta)
    if bad >= 0:
        raise ZeroMassEvidence(bad, sequence_index)
    post = np.zeros((L - 1, int(tmpl.pot_off[-1])))
    mt = np.zeros((L - 1, dbn.n, tmpl.max_card))
    mt1 = np.zeros((L - 1, dbn.n, tmpl.max_card))
    bad = _smooth_kernel(*args, ev, alpha, beta, post, mt, mt1)
    if bad >= 0:
        raise ZeroMassEvidence(bad, sequence_index)
    counters["trees"] += L - 1
    loglik = float(logz.sum())
    trees = SliceTrees(tmpl, post, mt, mt1, logz, loglik, ev)
    trees.alpha = alpha
    trees.beta = beta
    return trees, loglik


def filter_log_likelihood(dbn: Dbn, sequence, partition=None) -> tuple[float, float]:
    """Forward pass only; returns ``(total loglik, slice-0 log term)``."""
    ev = np.ascontiguousarray(sequence, dtype=np.int64)
    tmpl = build_clique_tree(dbn, partition)
    args = _kernel_args(tmpl, tmpl.base_potential(dbn))
    L = len(ev)
    alpha = np.zeros((L, int(tmpl.cl_off[-1])))
    alpha[0], log0 = initial_message(dbn, tmpl, ev[0])
    logz = np.zeros(L)
    logz[0] = log0
    bad = _forward_kernel(*args, ev, alpha, logz)
    if bad >= 0:
        raise ZeroMassEvidence(bad)
    return float(logz.sum()), float(log0)


# ----------------------------------------------------------------------
# flat-state exact inference
# ----------------------------------------------------------------------

def joint_states(cards: Sequence[int]) -> np.ndarray:
    """All joint assignments, shape ``(S, n)``, first variable slowest."""
    return np.indices(tuple(cards)).reshape(len(cards), -1).T.astype(np.int64)


def transition_matrix(dbn: Dbn, states: np.ndarray | None = None) -> np.ndarray:
    """Dense ``P(x' | x)`` over joint states, shape ``(S, S)``."""
    cards = dbn.cards
    if states is None:
        states = joint_states(cards)
    S = len(states)
    A = np.ones((S, S))
    for cpt in dbn.cpts:
        r = np.zeros((S, S), dtype=np.int64)
        for p in cpt.parents:
            col = states[:, p.var]
            r = r * cards[p.var] + (col[None, :] if p.lag == 0 else col[:, None])
        r = r * cards[cpt.child] + states[:, cpt.child][None, :]
        A *= cpt.table[r]
    return A


def _prior_vector(dbn: Dbn, states: np.ndarray) -> np.ndarray:
    p = np.ones(len(states))
    for i in range(dbn.n):
        p *= dbn.prior[i][0][states[:, i]]
    return p


def _evidence_vectors(ev: np.ndarray, states: np.ndarray) -> np.ndarray:
    out = np.ones((len(ev), len(states)))
    for i in range(ev.shape[1]):
        col = ev[:, i]
        obs = col != MISSING
        if obs.any():
            out[obs] *= (states[:, i][None, :] == col[obs][:, None])
    return out


@dataclass
class ExactPosteriors:
    """Flat-state smoothing result.

    ``pair[t]`` is ``phi(t, t+1)`` with shape ``(S, S)``; ``slice_post[t]`` is
    ``phi(t)``.  States follow :func:`joint_states` order.
    """

    cards: tuple[int, ...]
    pair: np.ndarray
    slice_post: np.ndarray
    log_likelihood: float
    logz: np.ndarray

    def pair_table(self, t: int) -> np.ndarray:
        """``phi(t, t+1)`` as an array with one axis per node (slice t vars, then slice t+1 vars)."""
        return self.pair[t].reshape(self.cards + self.cards)

    def marginal(self, t: int, refs) -> np.ndarray:
        n = len(self.cards)
        nodes = [v + (n if lag == 0 else 0) for v, lag in refs]
        return _marginalize(self.pair_table(t), list(range(2 * n)), nodes)


def exact_posteriors(dbn: Dbn, sequence, bound: int = 2 ** 20) -> ExactPosteriors:
    """Forward-backward over the enumerated joint state space (two-slice size <= ``bound``)."""
    if dbn.window != 2 or dbn.structure.max_lag > 1:
        raise ModelError("exact_posteriors needs a Markovian (window 2) model")
    ev = np.asarray(sequence, dtype=np.int64)
    if len(ev) < 2:
        raise ModelError("sequence length must be >= 2")
    S = int(np.prod(dbn.cards, dtype=np.int64))
    if S * S > bound:
        raise StateSpaceTooLarge(f"two-slice state space {S * S} exceeds bound {bound}")
    states = joint_states(dbn.cards)
    A = transition_matrix(dbn, states)
    E = _evidence_vectors(ev, states)
    L = len(ev)
    alpha = np.zeros((L, S))
    logz = np.zeros(L)
    a = _prior_vector(dbn, states) * E[0]
    z = a.sum()
    if not z > 0:
        raise ZeroMassEvidence(0)
    alpha[0] = a / z
    logz[0] = math.log(z)
    for t in range(L - 1):
        a = (alpha[t] @ A) * E[t + 1]
        z = a.sum()
        if not z > 0:
            raise ZeroMassEvidence(t + 1)
        alpha[t + 1] = a / z
        logz[t + 1] = math.log(z)
    beta = np.ones((L, S))
    for t in range(L - 2, -1, -1):
        b = A @ (E[t + 1] * beta[t + 1])
        beta[t] = b / b.sum()
    pair = np.zeros((L - 1, S, S))
    for t in range(L - 1):
        ph = alpha[t][:, None] * A * (E[t + 1] * beta[t + 1])[None, :]
        pair[t] = ph / ph.sum()
    sp = alpha * beta
    sp /= sp.sum(axis=1, keepdims=True)
    return ExactPosteriors(tuple(dbn.cards), pair, sp, float(logz.sum()), logz)


def exact_family_counts(dbn: Dbn, sequence, families, bound: int = 2 ** 20, block: int = 256):
    """Exact expected family counts for one sequence without storing pair posteriors.

    ``families`` is a list of ``(var, lag)`` ref lists (lags 0/1).  Returns
    ``(tables, loglik, logz)``; tables have one axis per ref in request order.
    """
    ev = np.asarray(sequence, dtype=np.int64)
    S = int(np.prod(dbn.cards, dtype=np.int64))
    if S * S > bound:
        raise StateSpaceTooLarge(f"two-slice state space {S * S} exceeds bound {bound}")
    states = joint_states(dbn.cards)
    A = transition_matrix(dbn, states)
    AT = np.ascontiguousarray(A.T)
    L = len(ev)
    n = dbn.n
    obs_masks = [[states[:, i] == v for v in range(dbn.cards[i])] for i in range(n)]

    def evec(row):
        e = np.ones(S)
        for i in range(n):
            if row[i] != MISSING:
                e = e * obs_masks[i][row[i]]
        return e

    alpha = np.zeros((L, S))
    logz = np.zeros(L)
    a = _prior_vector(dbn, states) * evec(ev[0])
    z = a.sum()
    if not z > 0:
        raise ZeroMassEvidence(0)
    alpha[0] = a / z
    logz[0] = math.log(z)
    for t in range(L - 1):
        a = (AT @ alpha[t]) * evec(ev[t + 1])
        z = a.sum()
        if not z > 0:
            raise ZeroMassEvidence(t + 1)
        alpha[t + 1] = a / z
        logz[t + 1] = math.log(z)
    # sum_t phi(t,t+1) = A * sum_t alpha_t (x) (e_{t+1} beta_{t+1}) / scale_t
    W = np.zeros((S, S))
    beta = np.ones(S)
    rows = []
    cols = []

    def flush():
        if rows:
            W[:] += np.asarray(rows).T @ np.asarray(cols)
            rows.clear()
            cols.clear()

    for t in range(L - 2, -1, -1):
        eb = evec(ev[t + 1]) * beta
        b = A @ eb
        # each transition's pair posterior sums to 1
        rows.append(alpha[t])
        cols.append(eb / (alpha[t] @ b))
        if len(rows) >= block:
            flush()
        beta = b / b.sum()
    flush()
    phi = (A * W).reshape(tuple(dbn.cards) + tuple(dbn.cards))
    all_nodes = list(range(2 * n))
    tables = []
    for fam in families:
        nodes = [v + (n if lag == 0 else 0) for v, lag in fam]
        tables.append(_marginalize(phi, all_nodes, nodes))
    return tables, float(logz.sum()), logz
