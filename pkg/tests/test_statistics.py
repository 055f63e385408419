import numpy as np
import pytest

from conftest import random_evidence, random_small_dbn
from dbnsem.inference import calibrate_slice_trees, counters
from dbnsem.model import (MISSING, Cpt, Dataset, ParentRef, TransitionStructure, make_dbn, make_variables,
                          sample_trajectories)
from dbnsem.statistics import (CompleteDataSource, ExpectedDataSource, StatisticsCache, batch_collect,
                               complete_counts, exact_expected_family_counts, expected_event_counts_factored,
                               expected_family_counts, family_event)

P = ParentRef
SEQ_A = [np.array([[0], [1], [1], [0]])]


def test_complete_counts_single_variable():
    (t,) = complete_counts(SEQ_A, [[(0, 0)]], cards=[2])
    assert t.table.tolist() == [1, 2]


def test_complete_counts_pair():
    (t,) = complete_counts(SEQ_A, [[(0, 1), (0, 0)]], cards=[2])
    assert t.table.tolist() == [[0, 1], [1, 1]]


def test_complete_counts_lag_out_of_range():
    (t,) = complete_counts([np.array([[0], [1]])], [[(0, 2)]], cards=[2])
    assert t.total == 0


def test_complete_counts_skip_missing():
    (t,) = complete_counts([np.array([[0], [MISSING], [1], [1]])], [[(0, 1), (0, 0)]], cards=[2])
    assert t.total == 1 and t.table[1, 1] == 1


def _chain_with_hidden():
    v = make_variables([("H", 2, "hidden"), ("O", 2)])
    st_ = TransitionStructure(((P(0, 1),), (P(0, 0), P(1, 1))))
    cpts = [Cpt(0, (P(0, 1),), [0.9, 0.1, 0.2, 0.8]),
            Cpt(1, (P(0, 0), P(1, 1)), [0.8, 0.2, 0.6, 0.4, 0.3, 0.7, 0.1, 0.9])]
    return make_dbn(v, st_, cpts)


def test_expected_counts_fully_observed_equal_complete_counts():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = random_small_dbn(rng, 4, hidden_prob=0.0)
        ev = [random_evidence(rng, d, 6, max_free=0)]
        trees, _ = calibrate_slice_trees(d, ev[0])
        fams = [family_event(i, d.structure.parents[i]) for i in range(d.n)]
        got = expected_family_counts(trees, fams)
        want = complete_counts(ev, fams, d.cards)
        fac = expected_event_counts_factored(trees, fams)
        for g, f, w in zip(got, fac, want):
            assert np.allclose(g.table, w.table, atol=1e-9)
            assert np.allclose(f.table, w.table, atol=1e-9)


def test_expected_counts_single_cluster_match_exact():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = random_small_dbn(rng, 4)
        ev = random_evidence(rng, d, 7)
        fams = [family_event(i, d.structure.parents[i]) for i in range(d.n)]
        trees, _ = calibrate_slice_trees(d, ev, "single")
        got = expected_family_counts(trees, fams)
        want, _, _ = exact_expected_family_counts(d, [ev], fams)
        for g, w in zip(got, want):
            assert np.allclose(g.table, w.table, atol=1e-9)


def test_uniform_model_all_missing_cells_equal():
    d = make_dbn(make_variables([("A", 2), ("B", 2)]), TransitionStructure(((P(0, 1),), (P(0, 1), P(0, 0)))))
    T = 9
    trees, _ = calibrate_slice_trees(d, np.full((T + 1, 2), MISSING))
    fams = [family_event(i, d.structure.parents[i]) for i in range(2)]
    for tab in expected_family_counts(trees, fams) + expected_event_counts_factored(trees, [[(0, 2), (1, 0)]]):
        assert np.allclose(tab.table, tab.total / tab.table.size)
    assert expected_family_counts(trees, fams)[1].table == pytest.approx(np.full((2, 2, 2), T / 8))


def test_single_variable_factored_equals_family():
    d = _chain_with_hidden()
    ev = sample_trajectories(d, 1, 50, seed=3).evidence_for(d)[0]
    trees, _ = calibrate_slice_trees(d, ev)
    (a,) = expected_event_counts_factored(trees, [[(0, 0)]])
    (b,) = expected_family_counts(trees, [[(0, 0)]])
    assert np.allclose(a.table, b.table, atol=1e-12)


def test_factored_recovers_correlation_sign():
    # two persistent hidden variables, the second copying the first within the slice, each observed noisily
    v = make_variables([("H1", 2, "hidden"), ("H2", 2, "hidden"), ("O1", 2), ("O2", 2)])
    st_ = TransitionStructure(((P(0, 1),), (P(0, 0),), (P(0, 0),), (P(1, 0),)))
    noisy = [0.85, 0.15, 0.15, 0.85]
    cpts = [Cpt(0, (P(0, 1),), [0.95, 0.05, 0.05, 0.95]), Cpt(1, (P(0, 0),), [0.9, 0.1, 0.1, 0.9]),
            Cpt(2, (P(0, 0),), noisy), Cpt(3, (P(1, 0),), noisy)]
    d = make_dbn(v, st_, cpts)
    ev = sample_trajectories(d, 1, 501, seed=11).evidence_for(d)[0]
    event = [(0, 0), (1, 0)]
    trees, _ = calibrate_slice_trees(d, ev)
    (fac,) = expected_event_counts_factored(trees, [event])
    (ex,), _, _ = exact_expected_family_counts(d, [ev], [event])

    def log_odds(t):
        return np.log(t[0, 0] * t[1, 1] / (t[0, 1] * t[1, 0]))

    assert log_odds(ex.table) > 0 and log_odds(fac.table) > 0
    assert fac.total == pytest.approx(ex.total)


def test_mass_conservation():
    rng = np.random.default_rng(2)
    for _ in range(10):
        d = random_small_dbn(rng, 3)
        ev = random_evidence(rng, d, 8)
        trees, _ = calibrate_slice_trees(d, ev)
        for lag in range(1, 4):
            (t,) = expected_event_counts_factored(trees, [[(0, lag), (0, 0)]])
            assert t.total == pytest.approx(7 - max(0, lag - 1), abs=1e-9)


def test_reduce_matches_direct_counts():
    rng = np.random.default_rng(3)
    seqs = [rng.integers(0, 3, size=(40, 3))]
    (big,) = complete_counts(seqs, [[(0, 1), (1, 0), (2, 1)]], cards=[3, 3, 3])
    (small,) = complete_counts(seqs, [[(2, 1), (0, 1)]], cards=[3, 3, 3])
    assert np.array_equal(big.reduce([(2, 1), (0, 1)]).table, small.table)


def test_batch_collect_dedup_and_cache():
    d = _chain_with_hidden()
    ds = sample_trajectories(d, 2, 30, seed=4)
    src = ExpectedDataSource(d, ds.evidence_for(d))
    cache = StatisticsCache()
    a, b = batch_collect([[(0, 0), (1, 1)], [(1, 1), (0, 0)]], src, cache)
    assert src.passes == 1 and src.computed == 1 and len(cache) == 1
    assert np.array_equal(a.table, b.table.T)
    batch_collect([[(0, 0), (1, 1)]], src, cache)
    assert src.passes == 1


def test_batch_collect_one_sweep_for_all_lags():
    d = _chain_with_hidden()
    ds = sample_trajectories(d, 1, 40, seed=5)
    src = ExpectedDataSource(d, ds.evidence_for(d))
    before = counters["trees"]
    batch_collect([[(0, lag), (1, 0)] for lag in range(4)], src)
    batch_collect([[(1, lag), (0, 0)] for lag in range(4)], src)
    assert counters["trees"] - before == 39


def test_cache_invalidated_by_new_source_version():
    ds = Dataset(("A",), (2,), SEQ_A)
    d = make_dbn(make_variables([("A", 2)]), TransitionStructure.empty(1))
    cache = StatisticsCache()
    s1 = CompleteDataSource.from_dataset(d, ds)
    batch_collect([[(0, 0)]], s1, cache)
    s2 = CompleteDataSource.from_dataset(d, ds)
    batch_collect([[(0, 0)]], s2, cache)
    assert s2.passes == 1
