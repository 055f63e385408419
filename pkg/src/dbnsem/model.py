"""Discrete dynamic Bayesian network representation.

A model is a prior over the first ``window - 1`` slices (independent
per-variable marginals) plus one stationary transition fragment.  Every
child ``X'_i`` lives in slice ``t+1``; its parents are ``ParentRef(var, lag)``
where lag 0 is the child's own slice, lag 1 the previous slice, and so on.

CPT tables are flat arrays with the child value fastest and the parent
configurations enumerated row-major over the ordered parent list, so
``cpt.table.reshape(parent_cards + (child_card,))`` is the natural view.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MISSING = -1

OBSERVABLE = "observable"
HIDDEN = "hidden"

_versions = itertools.count(1)


class ModelError(ValueError):
    """Raised for malformed models or inputs that violate an operation's preconditions."""


class ParentRef(NamedTuple):
    var: int
    lag: int


@dataclass(frozen=True)
class Variable:
    id: int
    name: str
    cardinality: int
    kind: str = OBSERVABLE

    @property
    def hidden(self) -> bool:
        return self.kind == HIDDEN


@dataclass(frozen=True)
class TransitionStructure:
    """Ordered parent lists, one per child, plus the indegree bound."""

    parents: tuple[tuple[ParentRef, ...], ...]
    max_indegree: int = 4

    def __post_init__(self):
        object.__setattr__(
            self, "parents",
            tuple(tuple(ParentRef(int(p[0]), int(p[1])) for p in fam) for fam in self.parents),
        )

    @classmethod
    def empty(cls, n: int, max_indegree: int = 4) -> "TransitionStructure":
        return cls(tuple(() for _ in range(n)), max_indegree)

    @property
    def n(self) -> int:
        return len(self.parents)

    @property
    def max_lag(self) -> int:
        return max((p.lag for fam in self.parents for p in fam), default=0)

    def with_parents(self, child: int, parents: Sequence[ParentRef]) -> "TransitionStructure":
        fams = list(self.parents)
        fams[child] = tuple(parents)
        return TransitionStructure(tuple(fams), self.max_indegree)

    def arcs(self):
        for child, fam in enumerate(self.parents):
            for p in fam:
                yield p, child

    def lag0_order(self) -> list[int] | None:
        """Topological order of the intra-slice subgraph, or None if it has a cycle."""
        n = self.n
        indeg = [0] * n
        children: list[list[int]] = [[] for _ in range(n)]
        for child, fam in enumerate(self.parents):
            for p in fam:
                if p.lag == 0:
                    indeg[child] += 1
                    children[p.var].append(child)
        ready = sorted(i for i in range(n) if indeg[i] == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        return order if len(order) == n else None

    def has_lag0_path(self, src: int, dst: int) -> bool:
        """True if ``dst`` is reachable from ``src`` along intra-slice arcs."""
        children: list[list[int]] = [[] for _ in range(self.n)]
        for child, fam in enumerate(self.parents):
            for p in fam:
                if p.lag == 0:
                    children[p.var].append(child)
        stack, seen = [src], {src}
        while stack:
            v = stack.pop()
            if v == dst:
                return True
            for c in children[v]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return False


@dataclass(frozen=True)
class Cpt:
    child: int
    parents: tuple[ParentRef, ...]
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(ParentRef(*p) for p in self.parents))
        t = np.array(self.table, dtype=float).ravel()
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def shaped(self, cards: Sequence[int]) -> np.ndarray:
        """View as an array of shape ``(*parent_cards, child_card)``."""
        return self.table.reshape(tuple(cards[p.var] for p in self.parents) + (cards[self.child],))


@dataclass(frozen=True, eq=False)
class Dbn:
    """Prior marginals for the first ``window - 1`` slices plus a stationary transition fragment.

    ``prior[i]`` has shape ``(window - 1, cardinality_i)``.
    """

    variables: tuple[Variable, ...]
    prior: tuple[np.ndarray, ...]
    structure: TransitionStructure
    cpts: tuple[Cpt, ...]
    window: int = 2
    version: int = field(default_factory=lambda: next(_versions), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        priors = []
        for v, p in zip(self.variables, self.prior):
            a = np.array(p, dtype=float).reshape(max(self.window - 1, 1), v.cardinality)
            a.setflags(write=False)
            priors.append(a)
        object.__setattr__(self, "prior", tuple(priors))
        object.__setattr__(self, "cpts", tuple(self.cpts))

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def cards(self) -> tuple[int, ...]:
        return tuple(v.cardinality for v in self.variables)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def index(self, name: str) -> int:
        for v in self.variables:
            if v.name == name:
                return v.id
        raise KeyError(name)

    @property
    def hidden_ids(self) -> list[int]:
        return [v.id for v in self.variables if v.hidden]

    def replace(self, **changes) -> "Dbn":
        kw = dict(variables=self.variables, prior=self.prior, structure=self.structure,
                  cpts=self.cpts, window=self.window)
        kw.update(changes)
        return Dbn(**kw)

    def with_cpts(self, cpts: Sequence[Cpt]) -> "Dbn":
        return self.replace(cpts=tuple(cpts))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Discrete sequences; ``sequences[s]`` is an int array of shape ``(length, n_vars)``.

    MISSING entries are ``-1``.  ``bin_edges`` and ``labels`` record how
    continuous and symbolic source columns were encoded, keyed by name.
    """

    names: tuple[str, ...]
    cards: tuple[int, ...]
    sequences: tuple[np.ndarray, ...]
    bin_edges: dict = field(default_factory=dict, compare=False)
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cards", tuple(int(c) for c in self.cards))
        seqs = []
        for s in self.sequences:
            a = np.array(s, dtype=np.int64)
            if a.ndim != 2 or a.shape[1] != len(self.names):
                raise ModelError(f"sequence shape {a.shape} does not match {len(self.names)} variables")
            if len(a) < 2:
                raise ModelError("sequences must have at least 2 slices")
            if np.any(a >= np.array(self.cards)) or np.any(a < MISSING):
                raise ModelError("value index out of range")
            a.setflags(write=False)
            seqs.append(a)
        object.__setattr__(self, "sequences", tuple(seqs))

    @property
    def num_transitions(self) -> int:
        return sum(len(s) - 1 for s in self.sequences)

    def column(self, name: str) -> int:
        return self.names.index(name)

    def evidence_for(self, dbn: Dbn) -> list[np.ndarray]:
        """Sequences re-indexed to the model's variable order; absent variables are MISSING."""
        cols = []
        for v in dbn.variables:
            if v.name in self.names:
                j = self.names.index(v.name)
                if self.cards[j] > v.cardinality:
                    raise ModelError(f"variable {v.name!r}: data cardinality {self.cards[j]} "
                                     f"exceeds model cardinality {v.cardinality}")
                cols.append(j)
            else:
                cols.append(None)
        out = []
        for s in self.sequences:
            ev = np.full((len(s), len(cols)), MISSING, dtype=np.int64)
            for i, j in enumerate(cols):
                if j is not None:
                    ev[:, i] = s[:, j]
            out.append(ev)
        return out

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return self.with_sequences([self.sequences[i] for i in indices])

    def with_sequences(self, sequences) -> "Dataset":
        return Dataset(self.names, self.cards, sequences, self.bin_edges, self.labels)

    def select(self, names: Sequence[str]) -> "Dataset":
        cols = [self.names.index(n) for n in names]
        return Dataset(tuple(names), tuple(self.cards[c] for c in cols),
                       [s[:, cols] for s in self.sequences],
                       {n: e for n, e in self.bin_edges.items() if n in names},
                       {n: e for n, e in self.labels.items() if n in names})


# ----------------------------------------------------------------------
# construction helpers
# ----------------------------------------------------------------------

def make_variables(spec: Sequence[tuple]) -> tuple[Variable, ...]:
    """Build variables from ``(name, cardinality[, kind])`` tuples."""
    out = []
    for i, s in enumerate(spec):
        name, card = s[0], int(s[1])
        kind = s[2] if len(s) > 2 else OBSERVABLE
        out.append(Variable(i, name, card, kind))
    return tuple(out)


def uniform_cpt(child: int, parents: Sequence[ParentRef], cards: Sequence[int]) -> Cpt:
    rows = int(np.prod([cards[p.var] for p in parents], dtype=np.int64))
    c = cards[child]
    return Cpt(child, tuple(parents), np.full(rows * c, 1.0 / c))


def random_cpt(child: int, parents: Sequence[ParentRef], cards: Sequence[int],
               rng: np.random.Generator, concentration: float = 1.0) -> Cpt:
    rows = int(np.prod([cards[p.var] for p in parents], dtype=np.int64))
    table = rng.dirichlet(np.full(cards[child], concentration), size=rows)
    return Cpt(child, tuple(parents), table.ravel())


def perturbed_cpt(child: int, parents: Sequence[ParentRef], cards: Sequence[int],
                  rng: np.random.Generator, scale: float = 0.1) -> Cpt:
    """Uniform rows scaled by ``exp(u)``, ``u ~ U(-scale, scale)``, then renormalized."""
    rows = int(np.prod([cards[p.var] for p in parents], dtype=np.int64))
    t = np.exp(rng.uniform(-scale, scale, size=(rows, cards[child])))
    t /= t.sum(axis=1, keepdims=True)
    return Cpt(child, tuple(parents), t.ravel())


def uniform_prior(variables: Sequence[Variable], window: int = 2) -> tuple[np.ndarray, ...]:
    return tuple(np.full((window - 1, v.cardinality), 1.0 / v.cardinality) for v in variables)


def make_dbn(variables, structure: TransitionStructure, cpts=None, prior=None, window: int | None = None) -> Dbn:
    """Assemble a model; missing CPTs and prior default to uniform."""
    variables = tuple(variables)
    cards = [v.cardinality for v in variables]
    if window is None:
        window = max(2, structure.max_lag + 1)
    if cpts is None:
        cpts = [uniform_cpt(i, structure.parents[i], cards) for i in range(len(variables))]
    if prior is None:
        prior = uniform_prior(variables, window)
    return Dbn(variables, tuple(prior), structure, tuple(cpts), window)


def random_dbn(variables, structure: TransitionStructure, rng: np.random.Generator,
               concentration: float = 1.0, random_prior: bool = True) -> Dbn:
    variables = tuple(variables)
    cards = [v.cardinality for v in variables]
    window = max(2, structure.max_lag + 1)
    cpts = [random_cpt(i, structure.parents[i], cards, rng, concentration) for i in range(len(variables))]
    if random_prior:
        prior = [rng.dirichlet(np.ones(v.cardinality), size=window - 1) for v in variables]
    else:
        prior = None
    return make_dbn(variables, structure, cpts, prior, window)


def estimate_prior(dbn: Dbn, dataset: Dataset) -> Dbn:
    """Empirical initial-slice frequencies with +1 smoothing; hidden variables stay uniform."""
    evs = dataset.evidence_for(dbn)
    prior = []
    for v in dbn.variables:
        p = np.ones((dbn.window - 1, v.cardinality))
        if not v.hidden and v.name in dataset.names:
            for ev in evs:
                for s in range(min(dbn.window - 1, len(ev))):
                    val = ev[s, v.id]
                    if val != MISSING:
                        p[s, val] += 1
        p /= p.sum(axis=1, keepdims=True)
        prior.append(p)
    return dbn.replace(prior=tuple(prior))


# ----------------------------------------------------------------------
# validation and dimension
# ----------------------------------------------------------------------

def validate_dbn(dbn: Dbn) -> list[str]:
    """Return a list of invariant violations; empty iff the model is valid."""
    problems = []
    names = [v.name for v in dbn.variables]
    if len(set(names)) != len(names):
        problems.append("variable names are not unique")
    for i, v in enumerate(dbn.variables):
        if v.id != i:
            problems.append(f"variable {v.name!r} has id {v.id}, expected {i}")
        if v.cardinality < 2:
            problems.append(f"variable {v.name!r} has cardinality {v.cardinality} < 2")
        if v.kind not in (OBSERVABLE, HIDDEN):
            problems.append(f"variable {v.name!r} has unknown kind {v.kind!r}")
    st = dbn.structure
    n = dbn.n
    if st.n != n:
        problems.append(f"structure has {st.n} families for {n} variables")
        return problems
    if dbn.window < 2:
        problems.append(f"window {dbn.window} < 2")
    cards = dbn.cards
    for child, fam in enumerate(st.parents):
        name = names[child]
        if len(set(fam)) != len(fam):
            problems.append(f"family of {name!r} has duplicate parents")
        if len(fam) > st.max_indegree:
            problems.append(f"family of {name!r} has indegree {len(fam)} > {st.max_indegree}")
        for p in fam:
            if not 0 <= p.var < n:
                problems.append(f"family of {name!r} references unknown variable {p.var}")
            if p.lag < 0 or p.lag > dbn.window - 1:
                problems.append(f"family of {name!r}: lag {p.lag} outside window {dbn.window}")
            if p.lag == 0 and p.var == child:
                problems.append(f"family of {name!r} contains itself at lag 0")
    if st.lag0_order() is None:
        problems.append("intra-slice (lag-0) arcs contain a cycle")
    if len(dbn.cpts) != n:
        problems.append(f"{len(dbn.cpts)} CPTs for {n} variables")
        return problems
    for child, cpt in enumerate(dbn.cpts):
        name = names[child]
        if cpt.child != child:
            problems.append(f"CPT at position {child} is for child {cpt.child}")
        if tuple(cpt.parents) != tuple(st.parents[child]):
            problems.append(f"CPT parents of {name!r} do not match the structure")
            continue
        if any(not 0 <= p.var < n for p in cpt.parents):
            continue
        rows = int(np.prod([cards[p.var] for p in cpt.parents], dtype=np.int64))
        if cpt.table.size != rows * cards[child]:
            problems.append(f"CPT of {name!r} has length {cpt.table.size}, expected {rows * cards[child]}")
            continue
        t = cpt.table.reshape(rows, cards[child])
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            problems.append(f"CPT of {name!r} has negative or non-finite entries")
        sums = t.sum(axis=1)
        for r in np.flatnonzero(np.abs(sums - 1.0) > 1e-12):
            problems.append(f"CPT of {name!r} row {r} sums to {sums[r]:.12g}")
    for v, p in zip(dbn.variables, dbn.prior):
        if p.shape != (dbn.window - 1, v.cardinality):
            problems.append(f"prior of {v.name!r} has shape {p.shape}")
            continue
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            problems.append(f"prior of {v.name!r} is not a distribution")
    return problems


def family_dimension(child: int, parents: Sequence[ParentRef], cards: Sequence[int]) -> int:
    rows = 1
    for p in parents:
        rows *= cards[p.var]
    return (cards[child] - 1) * rows


def dimension(structure: TransitionStructure, cards: Sequence[int]) -> int:
    """Number of free transition parameters."""
    return sum(family_dimension(i, fam, cards) for i, fam in enumerate(structure.parents))


# ----------------------------------------------------------------------
# semantics
# ----------------------------------------------------------------------

def _row_index(cpt: Cpt, cards, seq: np.ndarray, s: int) -> int:
    r = 0
    for p in cpt.parents:
        r = r * cards[p.var] + int(seq[s - p.lag, p.var])
    return r


def prior_log_prob(dbn: Dbn, seq: np.ndarray) -> float:
    """Log-probability of the first ``window - 1`` slices under the prior marginals."""
    seq = np.asarray(seq)
    total = 0.0
    for s in range(dbn.window - 1):
        for i in range(dbn.n):
            p = dbn.prior[i][s, seq[s, i]]
            if p <= 0:
                return -math.inf
            total += math.log(p)
    return total


def transition_log_prob(dbn: Dbn, seq: np.ndarray) -> float:
    """Sum of CPT log-lookups for child slices ``window - 1 .. len - 1``."""
    seq = np.asarray(seq)
    cards = dbn.cards
    total = 0.0
    for s in range(dbn.window - 1, len(seq)):
        for cpt in dbn.cpts:
            r = _row_index(cpt, cards, seq, s)
            p = cpt.table[r * cards[cpt.child] + seq[s, cpt.child]]
            if p <= 0:
                return -math.inf
            total += math.log(p)
    return total


def joint_log_prob(dbn: Dbn, seq) -> float:
    """Natural-log probability of a fully observed sequence (all variables, model order)."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 2 or seq.shape[1] != dbn.n:
        raise ModelError(f"sequence must have shape (length, {dbn.n})")
    if np.any(seq == MISSING):
        raise ModelError("joint_log_prob requires a fully observed sequence")
    if len(seq) < dbn.window:
        raise ModelError(f"sequence length {len(seq)} < window {dbn.window}")
    lp = prior_log_prob(dbn, seq)
    if lp == -math.inf:
        return lp
    return lp + transition_log_prob(dbn, seq)


def sample_trajectories(dbn: Dbn, num_sequences: int, length: int, seed=None,
                        include_hidden: bool = False) -> Dataset:
    """Ancestral sampling slice by slice in intra-slice topological order.

    All sequences are sampled in parallel; output is deterministic given ``seed``.
    """
    if length < dbn.window:
        raise ModelError(f"length {length} < window {dbn.window}")
    rng = np.random.default_rng(seed)
    order = dbn.structure.lag0_order()
    if order is None:
        raise ModelError("intra-slice arcs contain a cycle")
    cards = dbn.cards
    n = dbn.n
    data = np.zeros((num_sequences, length, n), dtype=np.int64)
    for s in range(dbn.window - 1):
        for i in range(n):
            cdf = np.cumsum(dbn.prior[i][s])
            u = rng.random(num_sequences)
            data[:, s, i] = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), cards[i] - 1)
    cdfs = []
    for cpt in dbn.cpts:
        c = cards[cpt.child]
        cdfs.append(np.cumsum(cpt.table.reshape(-1, c), axis=1))
    for s in range(dbn.window - 1, length):
        for i in order:
            cpt = dbn.cpts[i]
            r = np.zeros(num_sequences, dtype=np.int64)
            for p in cpt.parents:
                r = r * cards[p.var] + data[:, s - p.lag, p.var]
            cdf = cdfs[i][r]
            u = rng.random(num_sequences) * cdf[:, -1]
            data[:, s, i] = np.minimum((cdf <= u[:, None]).sum(axis=1), cards[i] - 1)
    keep = [v.id for v in dbn.variables if include_hidden or not v.hidden]
    return Dataset(tuple(dbn.variables[i].name for i in keep), tuple(cards[i] for i in keep),
                   [data[k][:, keep] for k in range(num_sequences)])


def fhmm_structure(num_hidden: int, hidden_cardinality: int, observables: Sequence[tuple[str, int]],
                   max_indegree: int = 6, seed=None, noise: float = 0.1) -> Dbn:
    """Factorial-HMM template: independent hidden chains, each observable emitted by all of them."""
    if num_hidden < 1:
        raise ModelError("num_hidden must be >= 1")
    if num_hidden > max_indegree:
        raise ModelError(f"observable indegree {num_hidden} exceeds max_indegree {max_indegree}")
    rng = np.random.default_rng(seed)
    spec = [(f"H{j + 1}", hidden_cardinality, HIDDEN) for j in range(num_hidden)]
    spec += [(name, card, OBSERVABLE) for name, card in observables]
    variables = make_variables(spec)
    fams = [(ParentRef(j, 1),) for j in range(num_hidden)]
    fams += [tuple(ParentRef(j, 0) for j in range(num_hidden)) for _ in observables]
    structure = TransitionStructure(tuple(fams), max_indegree)
    cards = [v.cardinality for v in variables]
    cpts = [perturbed_cpt(i, fams[i], cards, rng, noise) for i in range(len(variables))]
    return make_dbn(variables, structure, cpts)
