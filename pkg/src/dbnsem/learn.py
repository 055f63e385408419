"""Family scoring, staged greedy structure search, parametric EM and Structural EM."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, xlogy

from .inference import ZeroMassEvidence, filter_log_likelihood
from .model import (Cpt, Dataset, Dbn, ModelError, ParentRef, TransitionStructure, estimate_prior,
                    random_cpt, transition_log_prob)
from .statistics import (CompleteDataSource, EssTable, ExpectedDataSource, StatisticsCache, batch_collect,
                         exact_expected_family_counts, family_event)

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class SearchConfig:
    score: str = "bic"
    ess: float = 1.0
    max_indegree: int = 3
    allow_intra_slice: bool = False
    max_lag: int = 1
    stages: int = 10
    candidates_per_child: int = 6
    seed: int = 0
    em_tol: float = 1e-5
    em_max_iter: int = 50
    pseudo_count: float = 0.0
    sem_max_iter: int = 8
    sem_tol: float = 1e-6
    em_between: int = 5
    min_gain: float = 1e-9

    def __post_init__(self):
        if self.max_indegree < 1:
            raise ValueError("max_indegree must be >= 1")
        if self.ess <= 0:
            raise ValueError("equivalent sample size must be > 0")
        if self.score not in ("bic", "bde"):
            raise ValueError(f"unknown score {self.score!r}")


@dataclass(frozen=True)
class FamilyScore:
    child: int
    parents: tuple[ParentRef, ...]
    value: float
    ess: EssTable


# ----------------------------------------------------------------------
# estimation and scores
# ----------------------------------------------------------------------

def mle_from_counts(ess: EssTable, pseudo_count: float = 0.0) -> Cpt:
    """Row-normalized counts; rows without mass become uniform."""
    child = ess.event[-1][0]
    parents = tuple(ParentRef(v, l) for v, l in ess.event[:-1])
    c = ess.table.shape[-1]
    t = ess.table.reshape(-1, c) + pseudo_count
    tot = t.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(tot > 0, t / np.where(tot > 0, tot, 1.0), 1.0 / c)
    return Cpt(child, parents, theta.ravel())


def family_log_likelihood(ess: EssTable) -> float:
    c = ess.table.shape[-1]
    t = ess.table.reshape(-1, c)
    nu = t.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(nu > 0, t / np.where(nu > 0, nu, 1.0), 0.0)
    return float(xlogy(t, theta).sum())


def bic_family_score(ess: EssTable, cardinalities: Sequence[int] | None, T_total: float) -> float:
    """Log-likelihood at the MLE minus ``ln(T)/2`` times the family's parameter count."""
    if T_total <= 0:
        raise ValueError("T_total must be positive")
    shape = ess.table.shape
    dim = (shape[-1] - 1) * int(np.prod(shape[:-1], dtype=np.int64))
    return family_log_likelihood(ess) - 0.5 * math.log(T_total) * dim


def bde_family_score(ess: EssTable, equivalent_sample_size: float = 1.0) -> float:
    """BDeu marginal likelihood of a family with a uniform Dirichlet prior."""
    c = ess.table.shape[-1]
    t = ess.table.reshape(-1, c)
    q = t.shape[0]
    a_xu = equivalent_sample_size / (q * c)
    a_u = equivalent_sample_size / q
    nu = t.sum(axis=1)
    return float(np.sum(gammaln(a_u) - gammaln(a_u + nu)) + np.sum(gammaln(a_xu + t) - gammaln(a_xu)))


def structure_score(structure: TransitionStructure, source, config: SearchConfig = SearchConfig()) -> float:
    scorer = FamilyScorer(source, config)
    return sum(scorer.score(i, fam) for i, fam in enumerate(structure.parents))


class FamilyScorer:
    """Memoized family scores over one statistics source."""

    def __init__(self, source, config: SearchConfig, cache: StatisticsCache | None = None):
        self.source = source
        self.config = config
        self.cache = cache if cache is not None else StatisticsCache()
        self.T = source.num_transitions
        self._memo: dict = {}

    @staticmethod
    def _key(child, parents):
        return child, tuple(sorted(ParentRef(*p) for p in parents))

    def prefetch(self, families) -> None:
        need = []
        for child, parents in families:
            if self._key(child, parents) not in self._memo:
                need.append(family_event(child, sorted(ParentRef(*p) for p in parents)))
        if need:
            batch_collect(need, self.source, self.cache)

    def table(self, child, parents) -> EssTable:
        parents = sorted(ParentRef(*p) for p in parents)
        return batch_collect([family_event(child, parents)], self.source, self.cache)[0]

    def score(self, child, parents) -> float:
        key = self._key(child, parents)
        val = self._memo.get(key)
        if val is None:
            ess = self.table(child, key[1])
            if self.config.score == "bic":
                val = bic_family_score(ess, None, self.T)
            else:
                val = bde_family_score(ess, self.config.ess)
            self._memo[key] = val
        return val


# ----------------------------------------------------------------------
# search
# ----------------------------------------------------------------------

def candidate_pool(child: int, n: int, config: SearchConfig) -> list[ParentRef]:
    pool = []
    for v in range(n):
        if config.allow_intra_slice and v != child:
            pool.append(ParentRef(v, 0))
        for lag in range(1, config.max_lag + 1):
            pool.append(ParentRef(v, lag))
    return sorted(pool)


def potential_parents(child: int, structure: TransitionStructure, scorer: FamilyScorer,
                      config: SearchConfig, pool: Sequence[ParentRef] | None = None) -> list[ParentRef]:
    """Current parents plus the top non-parents ranked by single-addition score gain (positive only)."""
    current = tuple(structure.parents[child])
    if config.candidates_per_child <= 0:
        return list(current)
    if pool is None:
        pool = candidate_pool(child, structure.n, config)
    cands = [p for p in pool if p not in current]
    scorer.prefetch([(child, current)] + [(child, current + (p,)) for p in cands])
    base = scorer.score(child, current)
    gains = []
    for p in cands:
        g = scorer.score(child, current + (p,)) - base
        if g > config.min_gain:
            gains.append((-g, p))
    gains.sort()
    return list(current) + [p for _, p in gains[:config.candidates_per_child]]


@dataclass
class SearchResult:
    structure: TransitionStructure
    scores: list[FamilyScore]
    trace: list[dict] = field(default_factory=list)
    stages: int = 0

    @property
    def total(self) -> float:
        return sum(s.value for s in self.scores)


_MOVE_ORDER = {"add": 0, "delete": 1, "reverse": 2}


def greedy_family_search(structure: TransitionStructure, scorer: FamilyScorer, config: SearchConfig,
                         pools: dict | None = None) -> SearchResult:
    """Staged hill climbing over add / delete / reverse-intra-slice moves.

    Each stage fixes a candidate-parent set per child, prefetches the needed
    statistics in one batch, then applies the best positive-gain move until
    none remains.  Ties break on (child, move type, parent var, lag).
    """
    n = structure.n
    fams = [tuple(sorted(f)) for f in structure.parents]
    st = TransitionStructure(tuple(fams), config.max_indegree)
    scores = [scorer.score(i, fams[i]) for i in range(n)]
    trace: list[dict] = []
    stages = 0
    for stage in range(config.stages):
        stages += 1
        pots = [potential_parents(i, st, scorer, config, None if pools is None else pools.get(i))
                for i in range(n)]
        accepted = 0
        while True:
            moves = []
            for i in range(n):
                cur = fams[i]
                for p in pots[i]:
                    if p in cur or len(cur) >= config.max_indegree:
                        continue
                    if p.lag == 0 and (p.var == i or st.has_lag0_path(i, p.var)):
                        continue
                    moves.append(("add", i, p, {i: tuple(sorted(cur + (p,)))}))
                for p in cur:
                    moves.append(("delete", i, p, {i: tuple(q for q in cur if q != p)}))
                    if p.lag == 0 and config.allow_intra_slice:
                        j = p.var
                        if len(fams[j]) >= config.max_indegree:
                            continue
                        new_i = tuple(q for q in cur if q != p)
                        new_j = tuple(sorted(fams[j] + (ParentRef(i, 0),)))
                        trial = st.with_parents(i, new_i).with_parents(j, new_j)
                        if trial.lag0_order() is None:
                            continue
                        moves.append(("reverse", i, p, {i: new_i, j: new_j}))
            scorer.prefetch([(c, f) for _, _, _, ch in moves for c, f in ch.items()])
            best = None
            for kind, i, p, change in moves:
                gain = sum(scorer.score(c, f) - scores[c] for c, f in change.items())
                key = (-gain, i, _MOVE_ORDER[kind], p.var, p.lag)
                if best is None or key < best[0]:
                    best = (key, kind, i, p, change, gain)
            if best is None or best[5] <= config.min_gain:
                break
            _, kind, i, p, change, gain = best
            for c, f in change.items():
                fams[c] = f
                scores[c] = scorer.score(c, f)
                st = st.with_parents(c, f)
            accepted += 1
            trace.append({"stage": stage, "move": kind, "child": i, "parent": tuple(p),
                          "gain": gain, "score": sum(scores)})
        if accepted == 0:
            break
    result_scores = [FamilyScore(i, fams[i], scores[i], scorer.table(i, fams[i])) for i in range(n)]
    return SearchResult(st, result_scores, trace, stages)


# ----------------------------------------------------------------------
# complete-data fitting
# ----------------------------------------------------------------------

def fit_parameters(dbn: Dbn, source, pseudo_count: float = 0.0, structure: TransitionStructure | None = None,
                   cache: StatisticsCache | None = None) -> Dbn:
    """MLE CPTs for ``structure`` (default: the model's) from a statistics source."""
    st = structure or dbn.structure
    events = [family_event(i, fam) for i, fam in enumerate(st.parents)]
    tables = batch_collect(events, source, cache)
    cpts = [mle_from_counts(t, pseudo_count) for t in tables]
    window = max(2, st.max_lag + 1)
    prior = dbn.prior
    if window != dbn.window:
        prior = tuple(np.repeat(p[:1], window - 1, axis=0) for p in dbn.prior)
    return Dbn(dbn.variables, prior, st, tuple(cpts), window)


def learn_structure(dbn: Dbn, dataset: Dataset, config: SearchConfig = SearchConfig(),
                    first_child_slice: int = 1) -> tuple[Dbn, SearchResult]:
    """Greedy search on complete counts from ``dbn``'s structure, then MLE parameters and prior."""
    source = CompleteDataSource.from_dataset(dbn, dataset, first_child_slice)
    scorer = FamilyScorer(source, config)
    res = greedy_family_search(dbn.structure, scorer, config)
    fitted = fit_parameters(dbn, source, config.pseudo_count, res.structure, scorer.cache)
    return estimate_prior(fitted, dataset), res


# ----------------------------------------------------------------------
# EM
# ----------------------------------------------------------------------

def randomize_parameters(dbn: Dbn, seed=None, concentration: float = 1.0) -> Dbn:
    rng = np.random.default_rng(seed)
    cards = dbn.cards
    cpts = [random_cpt(i, dbn.structure.parents[i], cards, rng, concentration) for i in range(dbn.n)]
    return dbn.with_cpts(cpts)


@dataclass
class EmResult:
    dbn: Dbn
    trace: list[dict]
    log_likelihood: float
    stopped_on_decrease: bool = False


def _e_step(model: Dbn, evidence, partition, engine: str, ess_mode: str):
    events = [family_event(i, fam) for i, fam in enumerate(model.structure.parents)]
    if engine == "exact":
        return exact_expected_family_counts(model, evidence, events)
    src = ExpectedDataSource(model, evidence, partition)
    trees = src.trees
    ll = src.log_likelihood
    ll_trans = sum(t.transition_log_likelihood for t in trees)
    if ess_mode == "factored":
        tables = src.compute(events)
    else:
        tables = src.family_counts(events)
    return tables, ll, ll_trans


def parametric_em(dbn: Dbn, dataset: Dataset, partition=None, config: SearchConfig = SearchConfig(),
                  engine: str = "bk", ess_mode: str = "family", max_iter: int | None = None,
                  phase: str = "em") -> EmResult:
    """EM over transition CPTs with a fixed structure and prior.

    ``engine`` is "bk" (factored messages over ``partition``) or "exact"
    (flat-state forward-backward).  ``ess_mode`` "family" reads clique
    marginals, "factored" uses products of singleton marginals.  The returned
    model is the best one evaluated; a drop of more than 1e-3 bits/slice
    stops the run.
    """
    if engine not in ("bk", "exact") or ess_mode not in ("family", "factored"):
        raise ValueError("engine must be bk|exact and ess_mode family|factored")
    evidence = dataset.evidence_for(dbn)
    T = sum(len(e) - 1 for e in evidence)
    max_iter = config.em_max_iter if max_iter is None else max_iter
    model = dbn
    trace = []
    best = None
    prev = None
    stopped = False
    for it in range(max_iter + 1):
        try:
            tables, ll, ll_trans = _e_step(model, evidence, partition, engine, ess_mode)
        except ZeroMassEvidence as exc:
            log.warning("E-step failed at %s", exc)
            raise
        bits = -ll_trans / LN2 / T
        trace.append({"phase": phase, "iteration": it, "score": ll, "bits_per_slice": bits})
        if best is None or ll > best[1]:
            best = (model, ll)
        if prev is not None:
            if ll < prev - 1e-3 * LN2 * T:
                stopped = True
                log.info("EM log-likelihood decreased at iteration %d; keeping best model", it)
                break
            if abs(ll - prev) <= config.em_tol * abs(prev):
                break
        if it == max_iter:
            break
        cpts = [mle_from_counts(t, config.pseudo_count) for t in tables]
        model = model.with_cpts(cpts)
        prev = ll
    return EmResult(best[0], trace, best[1], stopped)


@dataclass
class SemResult:
    dbn: Dbn
    trace: list[dict]
    searches: list[SearchResult]


def structural_em(dbn: Dbn, dataset: Dataset, partition=None, config: SearchConfig = SearchConfig(),
                  pools: dict | None = None) -> SemResult:
    """Alternate smoothing under the current model with greedy search on expected counts.

    The search scores every family with the product-of-marginals expected
    counts of one E-step; parameters of the accepted structure come from the
    same cached counts, then ``config.em_between`` parametric EM iterations
    refine them before the next E-step.
    """
    evidence = dataset.evidence_for(dbn)
    model = dbn
    trace: list[dict] = []
    searches = []
    for outer in range(config.sem_max_iter):
        src = ExpectedDataSource(model, evidence, partition)
        scorer = FamilyScorer(src, config)
        start = sum(scorer.score(i, fam) for i, fam in enumerate(model.structure.parents))
        T = src.num_transitions
        bits = -sum(t.transition_log_likelihood for t in src.trees) / LN2 / T
        trace.append({"phase": "sem", "iteration": outer, "score": start, "bits_per_slice": bits,
                      "move": None})
        res = greedy_family_search(model.structure, scorer, config, pools)
        searches.append(res)
        for rec in res.trace:
            trace.append({"phase": "sem", "iteration": outer, "score": rec["score"], "bits_per_slice": None,
                          "move": rec})
        if not res.trace or res.total - start <= config.sem_tol:
            break
        model = fit_parameters(model, src, config.pseudo_count, res.structure, scorer.cache)
        if config.em_between > 0:
            model = parametric_em(model, dataset, partition, config, max_iter=config.em_between,
                                  phase="sem-em").dbn
    return SemResult(model, trace, searches)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def sequence_log_likelihood(dbn: Dbn, evidence, partition=None) -> float:
    """Log-likelihood of slices 1..T given slice 0's evidence."""
    if dbn.window > 2:
        if np.any(np.asarray(evidence) < 0):
            raise ModelError("k-TBN evaluation needs fully observed sequences")
        return transition_log_prob(dbn, evidence)
    total, first = filter_log_likelihood(dbn, evidence, partition)
    return total - first


def holdout_bits_per_slice(dbn: Dbn, test: Dataset, partition=None) -> float:
    """Held-out negative log2-likelihood per transition; zero-mass evidence counts as +inf."""
    evidence = test.evidence_for(dbn)
    if not evidence:
        raise ValueError("test dataset is empty")
    denom = sum(len(e) - (dbn.window - 1) for e in evidence)
    total = 0.0
    for k, ev in enumerate(evidence):
        try:
            total += sequence_log_likelihood(dbn, ev, partition)
        except ZeroMassEvidence as exc:
            log.warning("held-out sequence %d: %s", k, exc)
            return math.inf
    if total == -math.inf:
        return math.inf
    return -total / LN2 / denom
