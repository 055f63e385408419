import numpy as np
import pytest

from dbnsem.discover import (DiscoveryConfig, NonMarkovArc, discovery_pipeline, find_non_markov_arcs,
                             hidden_persistence_dbn, introduce_memory_variables, learn_ktbn, memory_cpt,
                             subsample_dataset)
from dbnsem.learn import SearchConfig
from dbnsem.model import (Cpt, Dataset, ModelError, ParentRef, TransitionStructure, make_dbn, make_variables, random_dbn,
                          sample_trajectories, validate_dbn)

P = ParentRef


def _order2(seed=0, length=4000):
    # X copies its value from two slices back with prob 0.9; Y is independent noise
    v = make_variables([("X", 2), ("Y", 2)])
    st_ = TransitionStructure(((P(0, 2),), ()))
    d = make_dbn(v, st_, [Cpt(0, (P(0, 2),), [0.9, 0.1, 0.1, 0.9]), Cpt(1, (), [0.5, 0.5])])
    return d, sample_trajectories(d, 1, length, seed=seed)


def test_k2_is_markovian_learning():
    _, ds = _order2()
    res = learn_ktbn(None, ds, 2)
    assert res.structure.max_lag <= 1 and find_non_markov_arcs(res) == []


def test_order2_chain_finds_lag2_arc():
    _, ds = _order2()
    res = learn_ktbn(None, ds, 3)
    arcs = find_non_markov_arcs(res)
    assert [(a.source, a.lag, a.target) for a in arcs] == [(0, 2, 0)]
    assert arcs[0].gain > 0


def test_markovian_process_k4_no_long_arcs():
    rng = np.random.default_rng(1)
    v = make_variables([("A", 2), ("B", 3)])
    d = random_dbn(v, TransitionStructure(((P(0, 1), P(1, 1)), (P(0, 1),))), rng)
    ds = sample_trajectories(d, 4, 5000, seed=2)
    assert find_non_markov_arcs(learn_ktbn(None, ds, 4)) == []


def test_find_non_markov_arcs_filter_and_order():
    st_ = TransitionStructure(((P(0, 1), P(1, 3)), (P(0, 2),)))
    arcs = find_non_markov_arcs(st_, {(P(1, 3), 0): 1.0, (P(0, 2), 1): 2.0})
    assert [(a.source, a.lag, a.target, a.gain) for a in arcs] == [(0, 2, 1, 2.0), (1, 3, 0, 1.0)]
    assert find_non_markov_arcs(TransitionStructure(((P(0, 1),),))) == []


def test_gains_match_search_trace():
    _, ds = _order2()
    res = learn_ktbn(None, ds, 3)
    adds = [r for r in res.trace if r["move"] == "add" and r["parent"][1] >= 2]
    assert [a.gain for a in find_non_markov_arcs(res)] == [r["gain"] for r in adds]


def test_non_markov_arc_requires_lag2():
    with pytest.raises(ValueError):
        NonMarkovArc(0, 1, 0, 0.0)


def _lag_model(lag):
    v = make_variables([("X", 2), ("Y", 2)])
    st_ = TransitionStructure(((P(1, lag),), (P(1, 1),)))
    return random_dbn(v, st_, np.random.default_rng(lag))


def test_lag4_creates_three_chained_memory_vars():
    d = _lag_model(4)
    aug = introduce_memory_variables(d, find_non_markov_arcs(d.structure))
    assert aug.names[2:] == ("Y@-1", "Y@-2", "Y@-3")
    assert aug.structure.parents[0] == (P(4, 1),)
    assert aug.structure.parents[3][0] == P(2, 1) and aug.structure.parents[4][0] == P(3, 1)
    assert aug.window == 2 and aug.structure.max_lag == 1 and validate_dbn(aug) == []


def test_epsilon_zero_is_deterministic_memory():
    d = _lag_model(2)
    aug = introduce_memory_variables(d, find_non_markov_arcs(d.structure), epsilon=0.0)
    full = sample_trajectories(aug, 3, 200, seed=3, include_hidden=True)
    for s in full.sequences:
        assert np.array_equal(s[1:, 2], s[:-1, 1])
    assert np.array_equal(aug.cpts[0].table, d.cpts[0].table)


def test_memory_cpt_mixture_value():
    t = memory_cpt(0, 1, 2, 0.3, 0.5).shaped([2, 2])
    # axes: copied value y, own past p, new value h
    assert t[0, 1, 0] == pytest.approx(0.775)
    assert t[1, 1, 1] == pytest.approx(0.7 + 0.3 * (0.5 + 0.25))


@pytest.mark.parametrize("eps,rho,card", [(0.0, 0.0, 2), (0.3, 0.5, 3), (0.99, 1.0, 4), (0.5, 0.0, 5)])
def test_memory_rows_sum_to_one(eps, rho, card):
    rows = memory_cpt(0, 1, card, eps, rho).table.reshape(-1, card)
    assert np.allclose(rows.sum(axis=1), 1, atol=1e-12)


def test_depth_cap_enforced():
    d = _lag_model(5)
    with pytest.raises(ModelError):
        introduce_memory_variables(d, find_non_markov_arcs(d.structure), depth_cap=3)


def test_subsample_examples():
    ds = Dataset(("A",), (10,), [np.arange(10)[:, None]])
    assert subsample_dataset(ds, 1).sequences[0].tolist() == ds.sequences[0].tolist()
    assert subsample_dataset(ds, 3).sequences[0][:, 0].tolist() == [0, 3, 6, 9]


def _square_wave(seed=0, num=10, length=1000):
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(num):
        h = ((np.arange(length) + rng.integers(10)) // 5) % 2
        flip = rng.random(length) < 0.1
        seqs.append(np.where(flip, 1 - h, h)[:, None])
    return Dataset(("O",), (2,), seqs)


def test_slow_process_detected_only_after_subsampling():
    ds = _square_wave()
    assert find_non_markov_arcs(learn_ktbn(None, ds, 3)) == []
    assert find_non_markov_arcs(learn_ktbn(None, subsample_dataset(ds, 5), 3)) != []


def test_pipeline_markovian_stops_at_iteration0():
    rng = np.random.default_rng(4)
    v = make_variables([("A", 2), ("B", 2)])
    d = random_dbn(v, TransitionStructure(((P(0, 1),), (P(0, 1), P(1, 1)))), rng)
    train = sample_trajectories(d, 4, 1000, seed=5)
    test = sample_trajectories(d, 2, 1000, seed=6)
    res = discovery_pipeline(train, test)
    assert [r["iteration"] for r in res.records] == ["baseline", 0]
    assert res.records[1]["num_hidden"] == 0


def test_pipeline_hidden_persistence_beats_baseline():
    gold = hidden_persistence_dbn()
    train = sample_trajectories(gold, 10, 500, seed=7)
    test = sample_trajectories(gold, 10, 500, seed=8)
    res = discovery_pipeline(train, test, DiscoveryConfig(iterations=1))
    labels = [r["iteration"] for r in res.records]
    assert labels[0] == "baseline" and labels[1:] == list(range(len(labels) - 1))
    it0 = res.row(0)
    assert it0["num_hidden"] >= 1
    assert it0["test_bits_per_slice"] < res.row("baseline")["test_bits_per_slice"]


def test_pipeline_deterministic():
    gold = hidden_persistence_dbn()
    train = sample_trajectories(gold, 4, 300, seed=9)
    a = discovery_pipeline(train, None, DiscoveryConfig(iterations=1, search=SearchConfig(seed=3)))
    b = discovery_pipeline(train, None, DiscoveryConfig(iterations=1, search=SearchConfig(seed=3)))
    assert a.records == b.records
    for x, y in zip(a.models, b.models):
        assert all(np.array_equal(c1.table, c2.table) for c1, c2 in zip(x.cpts, y.cpts))
