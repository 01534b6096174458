import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from msmkit.core import EpisodeDataset, StateSpace
from msmkit.errors import InconsistentFollowingSet, InvalidLevel, NeverAtRisk, TauOutOfRange
from msmkit.nonparam import (
    StepFunction,
    aalen_johansen,
    aalen_johansen_from_cumhaz,
    bootstrap_bands,
    cumulative_hazards,
    cumulative_incidence,
    nelson_aalen,
    occupancy,
    occupancy_estimator,
    restricted_mean_sojourn,
)
from oracles import aj_bruteforce, kaplan_meier

# ---------------------------------------------------------------- toy D3


def test_na_d3(d3):
    f = nelson_aalen(d3, (0, 1))
    assert list(f.times) == [1.0]
    assert f(1.0) == 1 / 3 and f(0.999) == 0 and f(10) == 1 / 3
    g = nelson_aalen(d3, (0, 2))
    assert list(g.times) == [3.0] and g(3.0) == 1.0
    assert f.variance(5.0) == 1 / 9


def test_na_no_events_is_zero():
    ss = StateSpace.competing_risks(2)
    ds = EpisodeDataset(ss, [1, 2], [0, 0], [1.0, 2.0], [0, 0], [1, -1])
    f = nelson_aalen(ds, (0, 2))
    assert len(f.times) == 0 and f(5.0) == 0.0


def test_na_never_at_risk():
    ss = StateSpace(("0", "1", "2"), frozenset({2}), frozenset({(0, 1), (1, 2)}))
    ds = EpisodeDataset(ss, [1], [0], [1.0], [0], [-1])
    with pytest.raises(NeverAtRisk):
        nelson_aalen(ds, (1, 2))


def test_aj_d3_row0(d3):
    P = aalen_johansen(d3, 0.0, [0.0, 3.0]).matrices
    np.testing.assert_array_equal(P[0], np.eye(3))
    assert P[1][0, 0] == 0.0
    assert abs(P[1][0, 1] - 1 / 3) < 1e-15 and abs(P[1][0, 2] - 2 / 3) < 1e-15


def test_occupancy_d3_and_cif(d3):
    occ = occupancy(d3, [0.0, 3.0, 5.0])
    np.testing.assert_allclose(occ.probs[1], [0, 1 / 3, 2 / 3], atol=1e-15)
    assert abs(cumulative_incidence(d3, 1, (), [0, 3])(3.0) - 1 / 3) < 1e-15
    assert abs(cumulative_incidence(d3, 2, (), [0, 3])(3.0) - 2 / 3) < 1e-15
    with pytest.raises(InconsistentFollowingSet):
        cumulative_incidence(d3, 1, (2,), [0, 3])


def test_rmst_d3(d3):
    occ = occupancy(d3, [0.0, 5.0])
    assert abs(restricted_mean_sojourn(occ.curve(1), 5.0) - 4 / 3) < 1e-15
    with pytest.raises(TauOutOfRange):
        restricted_mean_sojourn(occ.curve(1), 6.0)


def test_rmst_step_cases():
    f = StepFunction([1.0], [0.5], base=1.0, horizon=3.0)
    assert restricted_mean_sojourn(f, 3.0) == 2.0
    assert restricted_mean_sojourn(StepFunction([], [], base=1.0, horizon=4.0), 4.0) == 4.0


def test_zero_events_identity():
    ss = StateSpace.competing_risks(2)
    ds = EpisodeDataset(ss, [1, 2], [0, 0], [1.0, 2.0], [0, 0], [-1, -1])
    P = aalen_johansen(ds, 0.0, [0.0, 1.0, 2.0]).matrices
    for M in P:
        np.testing.assert_array_equal(M, np.eye(3))
    assert occupancy(ds, [0.0, 2.0]).probs[1][0] == 1.0
    assert cumulative_incidence(ds, 1, (), [0.0, 2.0])(2.0) == 0.0


def test_occupancy_linear_in_initial(d3):
    grid = [0.0, 1.0, 2.0, 3.0]
    a = occupancy(d3, grid, initial=[0.5, 0.5, 0.0]).probs
    P = aalen_johansen(d3, 0.0, grid).matrices
    np.testing.assert_allclose(a, 0.5 * P[:, 0] + 0.5 * P[:, 1], atol=1e-15)


def test_na_confidence_floor():
    ss = StateSpace.two_state()
    ds = EpisodeDataset(ss, range(5), [0] * 5, [1, 2, 3, 4, 5], [0] * 5, [1, -1, 1, -1, -1])
    f = nelson_aalen(ds, (0, 1))
    lo, hi = f.confidence()
    se = np.sqrt(f.variances)
    np.testing.assert_allclose(lo, np.maximum(f.values - 1.959963984540054 * se, 0))
    assert np.all(lo >= 0)


# ---------------------------------------------------------------- properties


def _two_state(rng, n):
    t = rng.exponential(1.0, n).round(1) + 0.1
    e = rng.random(n) < 0.7
    ss = StateSpace.two_state()
    return EpisodeDataset(ss, range(n), np.zeros(n), t, np.zeros(n, int), np.where(e, 1, -1)), t, e


@pytest.mark.parametrize("seed", range(20))
def test_km_equivalence(seed):
    rng = np.random.default_rng(seed)
    ds, t, e = _two_state(rng, 25)
    grid = np.unique(np.r_[0.0, t])
    P = aalen_johansen(ds, 0.0, grid).matrices
    for g, M in zip(grid, P):
        assert abs(M[0, 0] - kaplan_meier(t, e, g)) < 1e-14


def test_row_sums_and_absorbing_rows():
    from msmkit.sim import ScenarioSpec, simulate_paths
    base = {"state_space": {"labels": ["0", "1", "2", "3"], "absorbing": [3],
                            "allowed": [[0, 1], [1, 0], [1, 2], [0, 3], [2, 3], [1, 3]]},
            "intensities": {"0:1": 0.6, "1:0": 0.3, "1:2": 0.4, "0:3": 0.1, "2:3": 0.5,
                            "1:3": 0.2},
            "censoring": {"admin": 6.0, "rate": 0.2}, "n": 60}
    for seed in range(100):
        ds = simulate_paths(ScenarioSpec.from_dict({**base, "seed": seed}))
        M = aalen_johansen(ds, 0.0).matrices
        assert np.max(np.abs(M.sum(axis=2) - 1)) < 1e-12
        assert np.all(M >= 0) and np.all(M <= 1)
        np.testing.assert_array_equal(M[:, 3], np.tile([0, 0, 0, 1.0], (len(M), 1)))


@pytest.mark.parametrize("seed", range(5))
def test_aj_matches_bruteforce(seed):
    rng = np.random.default_rng(100 + seed)
    ds, rows = random_dataset(rng, 15)
    for t in (0.5, 1.0, 2.0, 4.0):
        np.testing.assert_allclose(aalen_johansen(ds, 0.0, [t]).matrices[0],
                                   aj_bruteforce(rows, 3, 0.0, t), atol=1e-14)
    np.testing.assert_allclose(aalen_johansen(ds, 0.7, [2.0]).matrices[0],
                               aj_bruteforce(rows, 3, 0.7, 2.0), atol=1e-14)


def test_uncensored_identity():
    rng = np.random.default_rng(4)
    ds, rows = random_dataset(rng, 40, censor=False)
    for t in (0.3, 1.0, 2.5):
        p = occupancy(ds, [t]).probs[0]
        state = np.zeros(40, int)
        for i, a, b, k, l in rows:
            if b <= t:
                state[i] = l
        frac = np.bincount(state, minlength=3) / 40
        np.testing.assert_allclose(p, frac, atol=1e-14)


def test_aj_from_na_identical():
    rng = np.random.default_rng(7)
    ds, _ = random_dataset(rng, 50)
    direct = aalen_johansen(ds, 0.0)
    rebuilt = aalen_johansen_from_cumhaz(cumulative_hazards(ds), 3, 0.0, direct.grid)
    np.testing.assert_array_equal(direct.matrices, rebuilt.matrices)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.booleans()), min_size=1, max_size=30))
def test_na_variance_formula(obs):
    ss = StateSpace.two_state()
    t = np.array([o[0] for o in obs], float)
    e = np.array([o[1] for o in obs])
    ds = EpisodeDataset(ss, range(len(t)), np.zeros(len(t)), t, np.zeros(len(t), int),
                        np.where(e, 1, -1))
    f = nelson_aalen(ds, (0, 1))
    var = 0.0
    for u in sorted(set(t[e])):
        n, d = np.sum(t >= u), np.sum((t == u) & e)
        var += d / n**2
        assert abs(f.variance(u) - var) < 1e-14


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_determinism_and_degenerate():
    rng = np.random.default_rng(3)
    ds, _ = random_dataset(rng, 30)
    grid = np.array([0.5, 1.0, 2.0])
    est = occupancy_estimator(0)
    a = bootstrap_bands(ds, est, grid, B=25, seed=11)
    b = bootstrap_bands(ds, est, grid, B=25, seed=11)
    np.testing.assert_array_equal(a.lower, b.lower)
    one = bootstrap_bands(ds, est, grid, B=1, seed=5)
    np.testing.assert_array_equal(one.lower, one.upper)
    with pytest.raises(InvalidLevel):
        bootstrap_bands(ds, est, grid, B=5, level=1.5)


@pytest.mark.slow
def test_bootstrap_coverage():
    from msmkit.sim import ScenarioSpec, simulate_paths
    truth = np.exp(-1.0)
    hits = 0
    for rep in range(200):
        spec = ScenarioSpec.from_dict({"state_space": StateSpace.two_state().to_dict(),
                                       "intensities": {"0:1": 1.0},
                                       "censoring": {"rate": 0.3}, "n": 100, "seed": rep})
        ds = simulate_paths(spec)
        b = bootstrap_bands(ds, occupancy_estimator(0), np.array([1.0]), B=500, seed=rep)
        hits += b.lower[0] <= truth <= b.upper[0]
    assert abs(hits / 200 - 0.95) <= 0.03
