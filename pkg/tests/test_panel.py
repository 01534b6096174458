import math

import numpy as np
import pytest

from msmkit.core import PanelDataset, PanelSubject, StateSpace
from msmkit.errors import ImpossibleTransitionObserved, InvalidGenerator, NonIdentifiable
from msmkit.panel import (
    PanelParams,
    PanelSpec,
    build_generator,
    expm,
    expm_batch,
    fit_panel,
    occupancy_from_fit,
    panel_loglik,
    panel_loglik_grad,
    transition_probability,
)
from oracles import taylor_expm

Q4 = np.array([[-1.1, 0.6, 0.3, 0.2],
               [0.4, -0.9, 0.5, 0.0],
               [0.0, 0.7, -1.5, 0.8],
               [0.0, 0.0, 0.0, 0.0]])
# Frozen output of the Taylor-series oracle for exp(0.7 * Q4).
Q4_EXP = np.array([
    [0.4944302632027665, 0.2421730086781298, 0.12275758876341696, 0.14063913935568645],
    [0.14585188449146744, 0.6063481753500483, 0.17340240535112345, 0.07439753480736096],
    [0.03119357592123825, 0.22404722193882978, 0.38757034861284717, 0.3571888535270849],
    [0.0, 0.0, 0.0, 1.0]])

PROG4 = StateSpace.progressive(4)


def _params(ss, log_lambda, beta=None, cutpoints=()):
    tr = tuple(ss.transitions)
    ll = np.asarray(log_lambda, float).reshape(len(tr), -1)
    b = np.zeros((len(tr), 0)) if beta is None else np.asarray(beta, float).reshape(len(tr), -1)
    return PanelParams(ll, b, tr, ss.size, cutpoints)


def _panel(ss, rows, names=()):
    """rows: (id, covariates, times, states)."""
    subs = [PanelSubject(i, np.asarray(x, float), np.asarray(t, float), np.asarray(s))
            for i, x, t, s in rows]
    return PanelDataset(ss, subs, names)


# ---------------------------------------------------------------- expm


def test_expm_identity_at_zero():
    np.testing.assert_array_equal(expm(Q4, 0.0), np.eye(4))


@pytest.mark.parametrize("a,dt", [(0.5, 1.0), (3.0, 0.2), (1e-6, 2.0), (40.0, 1.5)])
def test_expm_two_state_closed_form(a, dt):
    P = expm(np.array([[-a, a], [0.0, 0.0]]), dt)
    e = math.exp(-a * dt)
    np.testing.assert_allclose(P, [[e, -math.expm1(-a * dt)], [0, 1]], atol=1e-12, rtol=0)


def test_expm_matches_taylor_oracle():
    np.testing.assert_allclose(taylor_expm(0.7 * Q4), Q4_EXP, atol=1e-14, rtol=0)
    np.testing.assert_allclose(expm(Q4, 0.7), Q4_EXP, atol=1e-10, rtol=0)


def test_expm_random_generators_stochastic():
    rng = np.random.default_rng(0)
    for _ in range(50):
        K = rng.integers(2, 6)
        Q = rng.exponential(size=(K, K)) * (rng.random((K, K)) < 0.6)
        np.fill_diagonal(Q, 0)
        Q[np.diag_indices(K)] = -Q.sum(axis=1)
        dt = rng.exponential(3.0)
        P = expm(Q, dt)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(P, taylor_expm(Q * dt), atol=1e-10)


def test_expm_batch_matches_single():
    A = np.stack([Q4 * s for s in (0.1, 1.0, 10.0)])
    out = expm_batch(A)
    for a, p in zip(A, out):
        np.testing.assert_allclose(p, taylor_expm(a), atol=1e-10)


def test_invalid_generator():
    with pytest.raises(InvalidGenerator):
        expm(np.array([[-1.0, 0.5], [0.0, 0.0]]), 1.0)
    with pytest.raises(InvalidGenerator):
        expm(np.array([[1.0, -1.0], [0.0, 0.0]]), 1.0)


# ---------------------------------------------------------------- generator / P(s,t)


def test_build_generator_cases():
    ss = StateSpace.two_state()
    Q = build_generator(_params(ss, [math.log(0.5)]), (), 0)
    np.testing.assert_allclose(Q, [[-0.5, 0.5], [0, 0]], atol=1e-15)
    p = _params(PROG4, [0.1, -0.3, 0.2], [math.log(2)] * 3)
    Q0, Q1 = build_generator(p, [0.0], 0), build_generator(p, [1.0], 0)
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_allclose(Q1[off], 2 * Q0[off], rtol=1e-15)
    np.testing.assert_array_equal(Q0[3], 0)
    zero = _params(PROG4, [-np.inf] * 3)
    np.testing.assert_array_equal(build_generator(zero, (), 0), 0)


def test_transition_probability_two_bands_closed_form():
    ss = StateSpace.two_state()
    p = _params(ss, [[math.log(0.2), math.log(0.8)]], cutpoints=(5.0,))
    P = transition_probability(p, (), 0.0, 8.0)
    assert abs(P[0, 0] - math.exp(-0.2 * 5) * math.exp(-0.8 * 3)) < 1e-14
    np.testing.assert_array_equal(transition_probability(p, (), 3.0, 3.0), np.eye(2))
    single = _params(ss, [math.log(0.2)])
    np.testing.assert_array_equal(transition_probability(single, (), 0.0, 4.0),
                                  expm(build_generator(single, (), 0), 4.0))


def test_chapman_kolmogorov_across_bands():
    rng = np.random.default_rng(1)
    p = _params(PROG4, rng.normal(-1, 0.5, size=(3, 4)), rng.normal(size=(3, 1)),
                cutpoints=(5.0, 10.0, 20.0))
    for _ in range(30):
        s, u, t = np.sort(rng.uniform(0, 30, 3))
        lhs = transition_probability(p, [0.7], s, u) @ transition_probability(p, [0.7], u, t)
        np.testing.assert_allclose(lhs, transition_probability(p, [0.7], s, t), atol=1e-10)
    # boundaries exactly on cutpoints
    lhs = transition_probability(p, [1], 2, 5) @ transition_probability(p, [1], 5, 12)
    np.testing.assert_allclose(lhs, transition_probability(p, [1], 2, 12), atol=1e-10)


# ---------------------------------------------------------------- likelihood


TOY = [("a", (), (0.0, 1.0, 2.0), (0, 0, 1))]


@pytest.mark.parametrize("lam", [0.1, 0.7, 2.5])
def test_toy_loglik_closed_form(lam):
    ss = StateSpace.two_state()
    ll = panel_loglik(_params(ss, [math.log(lam)]), _panel(ss, TOY))
    assert abs(ll - (-lam + math.log(1 - math.exp(-lam)))) < 1e-13


def test_empty_dataset_loglik_zero():
    ss = StateSpace.two_state()
    assert panel_loglik(_params(ss, [0.0]), PanelDataset(ss, [])) == 0.0


def test_impossible_pair_rejected():
    data = _panel(PROG4, [("a", (), (0.0, 1.0), (2, 1))])
    with pytest.raises(ImpossibleTransitionObserved):
        panel_loglik(_params(PROG4, [0, 0, 0]), data)
    with pytest.raises(ImpossibleTransitionObserved):
        fit_panel(data, PanelSpec())


def test_toy_fit_ln2():
    ss = StateSpace.two_state()
    fit = fit_panel(_panel(ss, TOY), PanelSpec())
    assert abs(math.exp(fit.params.log_lambda[0, 0]) - math.log(2)) < 1e-8
    assert fit.converged


def _random_panel(rng, n=25, cut=(2.0,)):
    p = _params(PROG4, rng.normal(-1.0, 0.3, size=(3, len(cut) + 1)),
                rng.normal(0, 0.5, size=(3, 1)), cut)
    rows = []
    for i in range(n):
        x = float(rng.random() < 0.5)
        times = np.cumsum(rng.uniform(0.5, 1.5, size=5)) - 0.5
        s, states = 0, [0]
        for a, b in zip(times[:-1], times[1:]):
            P = transition_probability(p, [x], a, b)[s]
            s = int(rng.choice(4, p=P / P.sum()))
            states.append(s)
        rows.append((i, [x], times, states))
    return p, _panel(PROG4, rows, ("x",))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for rep in range(3):
        p, data = _random_panel(rng)
        for theta in (p.vector, p.vector + rng.normal(0, 0.3, p.vector.size)):
            q = p.with_vector(theta)
            _, g = panel_loglik_grad(q, data)
            fd = np.empty_like(theta)
            for j in range(theta.size):
                h = 1e-5 * (1 + abs(theta[j]))
                e = np.zeros_like(theta)
                e[j] = h
                fd[j] = (panel_loglik(p.with_vector(theta + e), data)
                         - panel_loglik(p.with_vector(theta - e), data)) / (2 * h)
            assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0) < 1e-6


def test_fit_gradient_and_occupancy():
    rng = np.random.default_rng(3)
    _, data = _random_panel(rng, n=80)
    fit = fit_panel(data, PanelSpec((2.0,), ("x",)))
    _, g = panel_loglik_grad(fit.params, data)
    assert np.max(np.abs(g)) < 1e-6
    np.testing.assert_array_equal(fit.covariance, fit.covariance.T)
    assert np.linalg.eigvalsh(fit.covariance).min() > 0
    occ = occupancy_from_fit(fit, [0.0], [0.0, 1.0, 5.0, 30.0])
    np.testing.assert_array_equal(occ.probs[0], [1, 0, 0, 0])
    np.testing.assert_allclose(occ.probs.sum(axis=1), 1, atol=1e-12)
    rows = fit.intensity_table()
    assert rows[1]["band"] == 1 and "ratio" in rows[1] and "ratio" not in rows[0]
    hr = fit.coefficient_table()[0]
    assert abs(hr["lower"] - math.exp(hr["coef"] - 1.959963984540054 * hr["se"])) < 1e-12


def test_non_identifiable_band():
    # nobody is followed beyond the cutpoint, so the second band is uninformed
    ss = StateSpace.two_state()
    data = _panel(ss, [(i, (), (0.0, 1.0, 2.0), (0, 0, 1)) for i in range(3)])
    with pytest.raises(NonIdentifiable):
        fit_panel(data, PanelSpec((10.0,)))


@pytest.mark.slow
def test_simulation_recovery():
    from msmkit.sim import ScenarioSpec, simulate_panel
    spec = ScenarioSpec.from_dict({
        "state_space": PROG4.to_dict(),
        "intensities": {"0:1": {"rates": [0.15, 0.3], "cutpoints": [4]},
                        "1:2": {"rates": [0.2, 0.1], "cutpoints": [4]},
                        "2:3": {"rates": [0.1, 0.25], "cutpoints": [4]}},
        "beta": {"0:1": {"x": 0.5}, "1:2": {"x": -0.4}, "2:3": {"x": 0.3}},
        "covariates": [{"name": "x", "dist": "bernoulli", "p": 0.5}],
        "visits": {"every": 1.0, "until": 10.0}, "n": 2000, "seed": 99})
    data = simulate_panel(spec)
    fit = fit_panel(data, PanelSpec((4.0,), ("x",)))
    truth = np.concatenate([np.log([0.15, 0.3, 0.2, 0.1, 0.1, 0.25]), [0.5, -0.4, 0.3]])
    z = np.abs(fit.params.vector - truth) / fit.se
    assert np.all(z < 3), z
