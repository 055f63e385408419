"""Hidden-variable discovery from violations of the Markov property.

A k-TBN (parents up to lag k-1) is learned over the current variables.
Every surviving arc with lag >= 2 is a non-Markovian dependence; it is
removed by adding a chain of hidden "memory" variables ``X@-1 .. X@-d``
that carry X's past values forward one slice at a time, which brings the
model back to a 2TBN that ordinary (approximate) inference can handle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .inference import ZeroMassEvidence
from .learn import (FamilyScorer, SearchConfig, fit_parameters, greedy_family_search, holdout_bits_per_slice,
                    learn_structure, parametric_em, sequence_log_likelihood)
from .model import (HIDDEN, Cpt, Dataset, Dbn, ModelError, ParentRef, TransitionStructure, Variable,
                    estimate_prior, fhmm_structure, make_dbn, make_variables, validate_dbn)
from .statistics import CompleteDataSource, ExpectedDataSource

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NonMarkovArc:
    source: int
    lag: int
    target: int
    gain: float

    def __post_init__(self):
        if self.lag < 2:
            raise ValueError("a non-Markovian arc has lag >= 2")


@dataclass(frozen=True)
class MemoryVarSpec:
    source: int
    depth: int
    name: str
    epsilon: float
    rho: float

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("memory depth must be >= 1")
        if not 0 <= self.epsilon < 1 or not 0 <= self.rho <= 1:
            raise ValueError("need 0 <= epsilon < 1 and 0 <= rho <= 1")


@dataclass
class KtbnResult:
    dbn: Dbn
    structure: TransitionStructure
    gains: dict
    trace: list
    source: object = None
    cache: object = None


def _is_complete(dbn: Dbn, evidence) -> bool:
    return not dbn.hidden_ids and all(np.all(e >= 0) for e in evidence)


def learn_ktbn(dbn: Dbn | None, dataset: Dataset, k: int, config: SearchConfig = SearchConfig(),
               partition=None) -> KtbnResult:
    """Greedy search with parents up to lag ``k-1``.

    With fully observed variables the counts are exact; otherwise they are
    product-of-marginals expected counts read from the current 2TBN's
    calibrated trees, so inference never runs on the k-TBN itself.  All
    events are counted on child slices ``k-1 ..`` so candidates are compared
    on the same transitions.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if dbn is None:
        dbn = make_dbn(make_variables(list(zip(dataset.names, dataset.cards))),
                       TransitionStructure.empty(len(dataset.names), config.max_indegree))
    evidence = dataset.evidence_for(dbn)
    cfg = replace(config, max_lag=k - 1)
    if _is_complete(dbn, evidence):
        source = CompleteDataSource(evidence, dbn.cards, (), first_child_slice=k - 1)
    else:
        if dbn.window != 2:
            raise ModelError("expected statistics need a Markovian current model")
        source = ExpectedDataSource(dbn, evidence, partition, first_child_slice=k - 1)
    scorer = FamilyScorer(source, cfg)
    res = greedy_family_search(dbn.structure, scorer, cfg)
    gains = {}
    for rec in res.trace:
        if rec["move"] == "add":
            gains[(ParentRef(*rec["parent"]), rec["child"])] = rec["gain"]
    for child, fam in enumerate(res.structure.parents):
        for p in fam:
            if (p, child) not in gains:
                rest = tuple(q for q in fam if q != p)
                gains[(p, child)] = scorer.score(child, fam) - scorer.score(child, rest)
    fitted = fit_parameters(dbn, source, cfg.pseudo_count, res.structure, scorer.cache)
    if fitted.window > 2:
        fitted = estimate_prior(fitted, dataset)
    return KtbnResult(fitted, res.structure, gains, res.trace, source, scorer.cache)


def find_non_markov_arcs(structure, gains: dict | None = None) -> list[NonMarkovArc]:
    """Every arc with lag >= 2, sorted by descending detection gain."""
    if isinstance(structure, KtbnResult):
        gains = structure.gains if gains is None else gains
        structure = structure.structure
    gains = gains or {}
    out = []
    for child, fam in enumerate(structure.parents):
        for p in fam:
            if p.lag >= 2:
                out.append(NonMarkovArc(p.var, p.lag, child, float(gains.get((p, child), 0.0))))
    out.sort(key=lambda a: (-a.gain, a.target, a.source, a.lag))
    return out


def memory_name(root: str, depth: int) -> str:
    return f"{root}@-{depth}"


def _memory_root(dbn: Dbn, var: int) -> tuple[int, int]:
    """(root variable, depth) of a memory variable; (var, 0) for ordinary variables."""
    v = dbn.variables[var]
    if v.hidden and "@-" in v.name:
        root, _, depth = v.name.rpartition("@-")
        if depth.isdigit() and root in dbn.names:
            return dbn.index(root), int(depth)
    return var, 0


def memory_cpt(child: int, copy_source: int, card: int, epsilon: float, rho: float) -> Cpt:
    """Noisy copy of ``copy_source`` at lag 1, with the noise biased toward the child's own past value."""
    h = np.arange(card)
    copy = (h[None, None, :] == h[:, None, None]).astype(float)
    keep = (h[None, None, :] == h[None, :, None]).astype(float)
    table = (1 - epsilon) * copy + epsilon * (rho * keep + (1 - rho) / card)
    table = np.broadcast_to(table, (card, card, card))
    return Cpt(child, (ParentRef(copy_source, 1), ParentRef(child, 1)), table.ravel())


def _substitute(cpt: Cpt, cards, mapping: dict) -> tuple[tuple, np.ndarray]:
    """Rename parents via ``mapping``; repeated parents collapse onto their diagonal."""
    table = cpt.shaped(cards)
    parents = [mapping.get(p, p) for p in cpt.parents]
    i = 0
    while i < len(parents):
        j = next((j for j in range(i + 1, len(parents)) if parents[j] == parents[i]), None)
        if j is None:
            i += 1
            continue
        table = np.moveaxis(np.diagonal(table, axis1=i, axis2=j), -1, i)
        del parents[j]
    return tuple(parents), table


def introduce_memory_variables(dbn: Dbn, arcs, epsilon: float = 0.3, rho: float = 0.5,
                               depth_cap: int = 3) -> Dbn:
    """Replace lag >= 2 arcs with chains of hidden memory variables; returns a 2TBN.

    An arc ``X(lag d+1) -> Y'`` becomes ``X@-d(lag 1) -> Y'`` where ``X@-1``
    copies X and ``X@-i`` copies ``X@-(i-1)``, each with a self (persistence)
    arc.  Chains are shared per source variable and only ever extended.
    """
    if not 0 <= epsilon < 1 or not 0 <= rho <= 1:
        raise ValueError("need 0 <= epsilon < 1 and 0 <= rho <= 1")
    arcs = list(arcs)
    st = dbn.structure
    # every lag >= 2 arc must go
    listed = {(ParentRef(a.source, a.lag), a.target) for a in arcs}
    for child, fam in enumerate(st.parents):
        for p in fam:
            if p.lag >= 2 and (p, child) not in listed:
                listed.add((p, child))
    cards = list(dbn.cards)
    variables = list(dbn.variables)
    names = [v.name for v in variables]

    existing_depth: dict[int, int] = {}
    for v in variables:
        root, d = _memory_root(dbn, v.id)
        if d:
            existing_depth[root] = max(existing_depth.get(root, 0), d)

    required: dict[int, int] = {}
    targets = {}
    for p, child in sorted(listed, key=lambda x: (x[1], x[0])):
        root, base = _memory_root(dbn, p.var)
        need = base + p.lag - 1
        if need > depth_cap:
            raise ModelError(f"memory depth {need} for {names[root]!r} exceeds cap {depth_cap}")
        required[root] = max(required.get(root, 0), need)
        targets[(p, child)] = (root, need)

    mem_id: dict[tuple[int, int], int] = {}
    for v in variables:
        root, d = _memory_root(dbn, v.id)
        if d:
            mem_id[(root, d)] = v.id
    new_specs = []
    for root in sorted(required):
        for d in range(existing_depth.get(root, 0) + 1, required[root] + 1):
            vid = len(variables)
            name = memory_name(names[root], d)
            if name in names:
                raise ModelError(f"variable name {name!r} already in use")
            variables.append(Variable(vid, name, cards[root], HIDDEN))
            names.append(name)
            cards.append(cards[root])
            mem_id[(root, d)] = vid
            new_specs.append(MemoryVarSpec(root, d, name, epsilon, rho))

    fams = []
    cpts = []
    for child, fam in enumerate(st.parents):
        mapping = {p: ParentRef(mem_id[targets[(p, child)]], 1) for p in fam if (p, child) in targets}
        parents, table = _substitute(dbn.cpts[child], cards, mapping)
        fams.append(parents)
        cpts.append(Cpt(child, parents, table.ravel()))
    for spec in new_specs:
        vid = mem_id[(spec.source, spec.depth)]
        src = spec.source if spec.depth == 1 else mem_id[(spec.source, spec.depth - 1)]
        cpt = memory_cpt(vid, src, cards[vid], epsilon, rho)
        fams.append(cpt.parents)
        cpts.append(cpt)
    indeg = max([st.max_indegree] + [len(f) for f in fams])
    structure = TransitionStructure(tuple(fams), indeg)
    prior = [p[:1] for p in dbn.prior] + [np.full((1, cards[s.source]), 1.0 / cards[s.source]) for s in new_specs]
    out = Dbn(tuple(variables), tuple(prior), structure, tuple(cpts), 2)
    problems = validate_dbn(out)
    if problems:
        raise ModelError("augmented model is invalid: " + "; ".join(problems))
    return out


def subsample_dataset(dataset: Dataset, factor: int) -> Dataset:
    """Keep every ``factor``-th slice; sequences shorter than 2 afterwards are dropped."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    seqs = [s[::factor] for s in dataset.sequences]
    return dataset.with_sequences([s for s in seqs if len(s) >= 2])


# ----------------------------------------------------------------------
# pipeline
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DiscoveryConfig:
    search: SearchConfig = SearchConfig()
    k: int = 3
    iterations: int = 2
    epsilon: float = 0.3
    rho: float = 0.5
    depth_cap: int = 3
    partition: object = None
    stall_tol: float = 1e-3


@dataclass
class DiscoveryResult:
    records: list[dict]
    models: list[Dbn] = field(default_factory=list)

    def row(self, label) -> dict:
        for r in self.records:
            if r["iteration"] == label:
                return r
        raise KeyError(label)


def _record(label, model: Dbn, arcs, train_ll, test: Dataset | None, partition) -> dict:
    bits = holdout_bits_per_slice(model, test, partition) if test is not None else None
    return {"iteration": label, "model_file": None, "num_hidden": len(model.hidden_ids),
            "non_markov_arcs": [{"source": model.names[a.source], "lag": a.lag, "target": model.names[a.target],
                         "gain": a.gain} for a in arcs],
            "train_ll": train_ll, "test_bits_per_slice": bits}


def _admissible(dbn: Dbn, arcs, depth_cap: int) -> list[NonMarkovArc]:
    out = []
    for a in arcs:
        _, base = _memory_root(dbn, a.source)
        if base + a.lag - 1 <= depth_cap:
            out.append(a)
    return out


def _drop_arcs(result: KtbnResult, keep, config: SearchConfig, dataset: Dataset) -> Dbn:
    """The k-TBN with only the lag >= 2 arcs in ``keep``, refit from the same statistics."""
    keep = {(ParentRef(a.source, a.lag), a.target) for a in keep}
    fams = tuple(tuple(p for p in fam if p.lag < 2 or (p, child) in keep)
                 for child, fam in enumerate(result.structure.parents))
    if fams == result.structure.parents:
        return result.dbn
    st = TransitionStructure(fams, result.structure.max_indegree)
    dbn = fit_parameters(result.dbn, result.source, config.pseudo_count, st, result.cache)
    return estimate_prior(dbn, dataset)


def discovery_pipeline(train: Dataset, test: Dataset | None = None,
                       config: DiscoveryConfig = DiscoveryConfig()) -> DiscoveryResult:
    """Baseline Markovian model, then repeated k-TBN search / memory introduction / EM.

    Records follow the comparison layout: ``"baseline"`` (Markovian structure
    over the observables only), then iterations ``0 .. N``.  Iteration 0
    searches on complete counts; later iterations use product-of-marginals
    expected counts from the previous model.  If iteration 0 finds no
    non-Markovian arc the baseline is reported as iteration 0 and the
    pipeline stops.
    """
    scfg = config.search
    part = config.partition
    obs = make_variables(list(zip(train.names, train.cards)))
    empty = make_dbn(obs, TransitionStructure.empty(len(obs), scfg.max_indegree))
    baseline, _ = learn_structure(empty, train, replace(scfg, max_lag=1))
    base_ll = _train_ll(baseline, train, part)
    records = [_record("baseline", baseline, [], base_ll, test, part)]
    models = [baseline]

    model = None
    prev_ll = base_ll
    for it in range(config.iterations + 1):
        kres = learn_ktbn(empty if model is None else model, train, config.k, scfg, part)
        arcs = _admissible(kres.dbn, find_non_markov_arcs(kres), config.depth_cap)
        if arcs:
            kdbn = _drop_arcs(kres, arcs, scfg, train)
            candidate = introduce_memory_variables(kdbn, arcs, config.epsilon, config.rho, config.depth_cap)
            candidate = estimate_prior(candidate, train)
        elif model is None:
            records.append(_record(0, baseline, [], base_ll, test, part))
            models.append(baseline)
            break
        else:
            candidate = _drop_arcs(kres, [], scfg, train)
        try:
            fitted = parametric_em(candidate, train, part, scfg).dbn
        except ZeroMassEvidence as exc:
            log.warning("EM failed on iteration %d: %s", it, exc)
            break
        ll = _train_ll(fitted, train, part)
        records.append(_record(it, fitted, arcs, ll, test, part))
        models.append(fitted)
        model = fitted
        if not arcs and ll - prev_ll <= config.stall_tol * abs(prev_ll):
            break
        prev_ll = ll
    return DiscoveryResult(records, models)


def fhmm_baseline(train: Dataset, test: Dataset | None, num_hidden: int, hidden_cardinality: int = 2,
                  config: DiscoveryConfig = DiscoveryConfig()) -> tuple[dict, Dbn]:
    """Factorial-HMM comparison row: fixed template, parameters by EM."""
    start = fhmm_structure(num_hidden, hidden_cardinality, list(zip(train.names, train.cards)),
                           max_indegree=max(num_hidden, 1), seed=config.search.seed)
    start = estimate_prior(start, train)
    fitted = parametric_em(start, train, config.partition, config.search).dbn
    rec = _record(f"FHMM {num_hidden} hid vars", fitted, [], _train_ll(fitted, train, config.partition),
                  test, config.partition)
    return rec, fitted


def hidden_persistence_dbn(persistence: float = 0.9, emission: float = 0.85, num_observed: int = 2) -> Dbn:
    """A binary hidden chain H with self-transition ``persistence`` emitting to binary observables.

    Each observable copies H with probability ``emission``.  Marginally the
    observables are non-Markovian, so this is the canonical discovery target.
    """
    spec = [("H", 2, HIDDEN)] + [(f"O{j + 1}", 2) for j in range(num_observed)]
    variables = make_variables(spec)
    p, e = persistence, emission
    fams = [(ParentRef(0, 1),)] + [(ParentRef(0, 0),)] * num_observed
    cpts = [Cpt(0, fams[0], [p, 1 - p, 1 - p, p])]
    cpts += [Cpt(j, fams[j], [e, 1 - e, 1 - e, e]) for j in range(1, num_observed + 1)]
    return make_dbn(variables, TransitionStructure(tuple(fams), 2), cpts)


def _train_ll(model: Dbn, train: Dataset, partition) -> float:
    try:
        return float(sum(sequence_log_likelihood(model, ev, partition) for ev in train.evidence_for(model)))
    except ZeroMassEvidence:
        return -math.inf
