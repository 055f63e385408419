import itertools

import numpy as np
import pytest

from dbnsem.model import MISSING, ParentRef, TransitionStructure, make_variables, random_dbn

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_small_dbn(rng, n_max=4, max_parents=3, intra=True, hidden_prob=0.3):
    """Random binary 2TBN with at most ``n_max`` variables; some may be hidden."""
    n = int(rng.integers(1, n_max + 1))
    kinds = ["hidden" if rng.random() < hidden_prob else "observable" for _ in range(n)]
    variables = make_variables([(f"V{i}", 2, kinds[i]) for i in range(n)])
    order = rng.permutation(n)
    rank = {v: r for r, v in enumerate(order)}
    fams = []
    for i in range(n):
        pool = [ParentRef(v, 1) for v in range(n)]
        if intra:
            pool += [ParentRef(v, 0) for v in range(n) if rank[v] < rank[i]]
        k = int(rng.integers(0, min(max_parents, len(pool)) + 1))
        pick = rng.choice(len(pool), size=k, replace=False)
        fams.append(tuple(pool[j] for j in sorted(pick)))
    return random_dbn(variables, TransitionStructure(tuple(fams), max_parents), rng)


def random_evidence(rng, dbn, length, max_free=14):
    """Sample a trajectory, then hide hidden variables and a random subset of other cells."""
    from dbnsem.model import sample_trajectories
    full = sample_trajectories(dbn, 1, length, seed=int(rng.integers(2 ** 31)), include_hidden=True)
    ev = full.sequences[0].copy()
    ev[:, dbn.hidden_ids] = MISSING
    ev[rng.random(ev.shape) < rng.uniform(0, 0.5)] = MISSING
    free = np.argwhere(ev == MISSING)
    if len(free) > max_free:
        keep = rng.choice(len(free), size=len(free) - max_free, replace=False)
        for j in keep:
            t, i = free[j]
            ev[t, i] = full.sequences[0][t, i]
    return ev


def brute_force(dbn, ev):
    """Enumerate every completion of the MISSING cells; return (loglik, completions, weights)."""
    ev = np.asarray(ev)
    L, n = ev.shape
    free = [tuple(c) for c in np.argwhere(ev == MISSING)]
    cards = dbn.cards
    grids = [range(cards[i]) for _, i in free]
    combos = np.array(list(itertools.product(*grids)), dtype=np.int64)
    combos = combos.reshape(len(combos), len(free))
    X = np.repeat(ev[None], len(combos), axis=0)
    for j, (t, i) in enumerate(free):
        X[:, t, i] = combos[:, j]
    logp = np.zeros(len(combos))
    with np.errstate(divide="ignore"):
        for i in range(n):
            logp += np.log(dbn.prior[i][0][X[:, 0, i]])
        for t in range(1, L):
            for cpt in dbn.cpts:
                r = np.zeros(len(combos), dtype=np.int64)
                for p in cpt.parents:
                    r = r * cards[p.var] + X[:, t - p.lag, p.var]
                r = r * cards[cpt.child] + X[:, t, cpt.child]
                logp += np.log(cpt.table[r])
    m = logp.max()
    w = np.exp(logp - m)
    z = w.sum()
    return m + np.log(z), X, w / z


def brute_marginal(X, w, cards, cells):
    """P(values at ``cells``) where ``cells`` is a list of (slice, var)."""
    shape = tuple(cards[v] for _, v in cells)
    out = np.zeros(shape)
    idx = tuple(X[:, t, v] for t, v in cells)
    np.add.at(out, idx, w)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
