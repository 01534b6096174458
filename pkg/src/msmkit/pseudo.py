"""Jackknife pseudo-values and marginal regression on them.

Pseudo-values ``V_i = n·θ̂ − (n−1)·θ̂^(−i)`` are computed exactly: all
leave-one-out Aalen-Johansen fits run as one weighted batch with weight
vectors ``1 − e_i``. Regression uses an independence-working GEE with a
sandwich variance. The inverse-probability-of-censoring weighted direct
binomial model is provided as an alternative that does not need the
jackknife.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .core import EpisodeDataset
from .errors import (
    DelayedEntryUnsupported,
    NoCensoringInformation,
    NotConverged,
    SingularDesign,
    T0OutOfRange,
    WeightOutOfSupport,
)
from .nonparam import _hazard_increments, _weighted_counts, product_integral

# ---------------------------------------------------------------- links


class Link:
    name = "identity"

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)

    def derivative(self, eta):
        """dμ/dη."""
        return np.ones_like(np.asarray(eta, dtype=float))


class Logit(Link):
    name = "logit"

    def link(self, mu):
        return special.logit(mu)

    def inverse(self, eta):
        return special.expit(eta)

    def derivative(self, eta):
        m = special.expit(eta)
        return m * special.expit(-np.asarray(eta))


class Cloglog(Link):
    name = "cloglog"

    def link(self, mu):
        return np.log(-np.log1p(-np.asarray(mu, dtype=float)))

    def inverse(self, eta):
        return -np.expm1(-np.exp(eta))

    def derivative(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.exp(eta - np.exp(eta))


LINKS = {"identity": Link(), "logit": Logit(), "cloglog": Cloglog()}


def get_link(link) -> Link:
    if isinstance(link, Link):
        return link
    try:
        return LINKS[str(link).lower()]
    except KeyError:
        raise ValueError(f"unknown link {link!r}; choose from {sorted(LINKS)}") from None


# ---------------------------------------------------------------- pseudo-values

@dataclass(frozen=True)
class PseudoValueSet:
    t0: float
    state: int
    values: np.ndarray
    base_estimate: float
    subject_ids: np.ndarray
    kind: str = "occupancy"   # or "rmst"

    def to_rows(self) -> list:
        return [{"id": sid.item() if hasattr(sid, "item") else sid, "pseudo": float(v)}
                for sid, v in zip(self.subject_ids, self.values)]


def _check_no_delayed_entry(dataset: EpisodeDataset):
    entry = dataset.entry_times()
    if np.any(entry > 0):
        i = int(np.flatnonzero(entry > 0)[0])
        raise DelayedEntryUnsupported(
            "delayed entry makes leave-one-out pseudo-values inconsistent",
            subject=str(dataset.subject_ids[i]), entry=float(entry[i]))


def _initial_states(dataset: EpisodeDataset) -> np.ndarray:
    first = np.r_[True, dataset.subject_code[1:] != dataset.subject_code[:-1]]
    out = np.empty(dataset.n_subjects, dtype=int)
    out[dataset.subject_code[first]] = dataset.from_state[first]
    return out


def _batched_functional(dataset, t0, weights, rmst):
    """Occupancy at t0 (or its integral over (0, t0]) for each weight row; (B, K)."""
    K = dataset.state_space.size
    W = np.atleast_2d(weights)
    z0 = _initial_states(dataset)
    init = np.zeros((W.shape[0], K))
    for k in range(K):
        init[:, k] = W[:, z0 == k].sum(axis=1)
    init /= W.sum(axis=1, keepdims=True)
    c = _weighted_counts(dataset, W)
    dL = _hazard_increments(c)
    vals, integral = product_integral(c.times, dL, 0.0, np.array([t0]),
                                      integrate_to=t0 if rmst else None, initial=init)
    return integral if rmst else vals[0]


def _pseudo(dataset: EpisodeDataset, state, t0: float, rmst: bool, chunk: int = 128):
    _check_no_delayed_entry(dataset)
    k = dataset.state_space.index(state)
    t0 = float(t0)
    if not np.isfinite(t0) or t0 < 0 or t0 > dataset.tstop.max():
        raise T0OutOfRange(f"t0={t0} lies outside the observed span (0, {dataset.tstop.max()}]",
                           t0=t0, max_time=float(dataset.tstop.max()))
    n = dataset.n_subjects
    if not rmst and _complete_through(dataset, t0):
        # AJ is then the empirical fraction and the jackknife collapses to the
        # indicator; return it directly so no rounding residue survives
        ind = (state_at(dataset, t0) == k).astype(float)
        return PseudoValueSet(t0, k, ind, float(ind.mean()), dataset.subject_ids, "occupancy")
    full = _batched_functional(dataset, t0, np.ones((1, n)), rmst)[0, k]
    loo = np.empty(n)
    for a in range(0, n, chunk):
        idx = np.arange(a, min(a + chunk, n))
        W = np.ones((len(idx), n))
        W[np.arange(len(idx)), idx] = 0.0
        loo[idx] = _batched_functional(dataset, t0, W, rmst)[:, k]
    values = n * full - (n - 1) * loo
    return PseudoValueSet(t0, k, values, float(full), dataset.subject_ids,
                          "rmst" if rmst else "occupancy")


def _complete_through(dataset: EpisodeDataset, t0: float) -> bool:
    """True when every subject is either absorbed by t0 or followed up to t0."""
    s = _summaries(dataset)
    return bool(np.all((s.absorbed & (s.exit_time <= t0)) | (s.exit_time >= t0)))


def pseudo_occupancy(dataset: EpisodeDataset, state, t0: float) -> PseudoValueSet:
    """Exact jackknife pseudo-values for p_k(t0) with the Aalen-Johansen base estimator.

    Raises
    ------
    DelayedEntryUnsupported
        If any subject enters after time 0.
    T0OutOfRange
        If ``t0`` exceeds the last follow-up time.
    """
    return _pseudo(dataset, state, t0, rmst=False)


def pseudo_rmst(dataset: EpisodeDataset, state, tau: float) -> PseudoValueSet:
    """Pseudo-values for the restricted mean sojourn ∫_0^τ p_k(u) du."""
    return _pseudo(dataset, state, tau, rmst=True)


# ---------------------------------------------------------------- GEE

@dataclass
class GeeFit:
    beta: np.ndarray
    sandwich_covariance: np.ndarray
    link: str
    iterations: int
    converged: bool
    names: tuple
    residual_norm: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sandwich_covariance))

    @property
    def p_values(self) -> np.ndarray:
        return 2 * stats.norm.sf(np.abs(self.beta / self.se))

    def table(self, level=0.95) -> list:
        z = stats.norm.ppf(0.5 + level / 2)
        return [{"term": n, "coef": float(b), "se": float(s), "lower": float(b - z * s),
                 "upper": float(b + z * s), "p": float(p)}
                for n, b, s, p in zip(self.names, self.beta, self.se, self.p_values)]

    def to_dict(self) -> dict:
        return {"link": self.link, "converged": self.converged, "iterations": self.iterations,
                "coefficients": self.table(),
                "covariance": self.sandwich_covariance.tolist()}


def _design(covariates, n, names=None):
    if covariates is None:
        X = np.zeros((n, 0))
    else:
        X = np.asarray(covariates, dtype=float).reshape(n, -1)
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(X.shape[1]))
    D = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise SingularDesign("design matrix (with intercept) is not of full column rank",
                             columns=D.shape[1])
    return D, ("(intercept)",) + names


def _variance_fn(working_variance, mu):
    if working_variance == "binomial":
        return np.clip(mu * (1 - mu), 1e-12, None)
    return np.ones_like(mu)


def solve_gee(y, D, link, weights=None, working_variance="independence", max_iter=200,
              tol=1e-9):
    """Solve Σ w_i ∂μ_i/∂β (y_i − μ_i)/v_i = 0 by Fisher scoring with step halving."""
    lk = get_link(link)
    n, p = D.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    beta = np.zeros(p)
    ybar = float(np.sum(w * y) / np.sum(w))
    if lk.name != "identity":
        beta[0] = float(lk.link(np.clip(ybar, 1e-4, 1 - 1e-4)))
    else:
        beta[0] = ybar

    def pieces(b):
        eta = D @ b
        mu = lk.inverse(eta)
        dmu = lk.derivative(eta)
        v = _variance_fn(working_variance, mu)
        G = D * dmu[:, None]
        U = G.T @ (w * (y - mu) / v)
        return U, G, v, mu

    U, G, v, mu = pieces(beta)
    it = 0
    while np.max(np.abs(U)) >= tol and it < max_iter:
        it += 1
        J = G.T @ (G * (w / v)[:, None])
        try:
            step = np.linalg.solve(J, U)
        except np.linalg.LinAlgError:
            raise SingularDesign("estimating-equation Jacobian is singular") from None
        t, cur = 1.0, np.max(np.abs(U))
        for _ in range(40):
            cand = beta + t * step
            Un, Gn, vn, mun = pieces(cand)
            if np.all(np.isfinite(Un)) and np.max(np.abs(Un)) < cur * (1 + 1e-12) + tol:
                break
            t /= 2
        beta, U, G, v, mu = cand, Un, Gn, vn, mun
    if np.max(np.abs(U)) >= tol:
        raise NotConverged("GEE solver did not converge", iterations=it,
                           residual=float(np.max(np.abs(U))))
    A = G.T @ (G * (w / v)[:, None])
    S = G * (w * (y - mu) / v)[:, None]
    Ainv = np.linalg.inv(A)
    cov = Ainv @ (S.T @ S) @ Ainv
    return beta, (cov + cov.T) / 2, it, float(np.max(np.abs(U)))


def fit_gee(pv: PseudoValueSet | np.ndarray, covariates=None, link="cloglog", names=None,
            working_variance="independence") -> GeeFit:
    """Marginal regression g(E V_i) = β₀ + x_iᵀβ on pseudo-values.

    ``working_variance="independence"`` uses ``A = ∂μ/∂β``; ``"binomial"``
    divides by μ(1−μ), which for binary responses and the logit link gives
    ordinary logistic regression.
    """
    y = pv.values if isinstance(pv, PseudoValueSet) else np.asarray(pv, dtype=float)
    D, names = _design(covariates, len(y), names)
    beta, cov, it, res = solve_gee(y, D, link, working_variance=working_variance)
    return GeeFit(beta, cov, get_link(link).name, it, True, names, res)


# ---------------------------------------------------------------- IPCW

@dataclass(frozen=True)
class _SubjectSummary:
    exit_time: np.ndarray      # last tstop
    absorbed: np.ndarray       # ended by a transition into an absorbing state
    censored: np.ndarray       # last record censored
    last: np.ndarray           # index of last record


def _summaries(dataset: EpisodeDataset) -> _SubjectSummary:
    code = dataset.subject_code
    last = np.r_[code[1:] != code[:-1], True]
    idx = np.empty(dataset.n_subjects, dtype=int)
    idx[code[last]] = np.flatnonzero(last)
    to = dataset.to_state[idx]
    absorbing = np.array(sorted(dataset.state_space.absorbing), dtype=int)
    return _SubjectSummary(dataset.tstop[idx], np.isin(to, absorbing), to < 0, idx)


def state_at(dataset: EpisodeDataset, t: float) -> np.ndarray:
    """Observed state at time t per subject (−1 when unknown because censored before t)."""
    out = np.full(dataset.n_subjects, -1, dtype=int)
    z0 = _initial_states(dataset)
    for i in range(len(dataset)):
        c = dataset.subject_code[i]
        if dataset.tstart[i] < t <= dataset.tstop[i]:
            if dataset.tstop[i] == t and dataset.to_state[i] >= 0:
                out[c] = dataset.to_state[i]
            else:
                out[c] = dataset.from_state[i]
        elif dataset.tstop[i] <= t and dataset.to_state[i] >= 0 and \
                dataset.to_state[i] in dataset.state_space.absorbing:
            out[c] = dataset.to_state[i]
    out[(out < 0) & (t <= 0)] = z0[(out < 0) & (t <= 0)]
    return out


def censoring_survival(dataset: EpisodeDataset):
    """Kaplan-Meier of the censoring distribution; returns (times, G after each time)."""
    s = _summaries(dataset)
    x = s.exit_time
    times = np.unique(x[s.censored])
    Y = np.array([(x >= c).sum() for c in times], dtype=float)
    d = np.array([(x[s.censored] == c).sum() for c in times], dtype=float)
    return times, np.cumprod(1 - d / Y)


def _G_minus(times, G, u):
    if len(times) == 0:
        return np.ones_like(np.asarray(u, dtype=float))
    i = np.searchsorted(times, u, side="left") - 1
    return np.where(i >= 0, G[np.maximum(i, 0)], 1.0)


def ipcw_weights(dataset: EpisodeDataset, t0: float) -> np.ndarray:
    """Per-subject weights I(observed through t0 ∧ T†) / Ĝ((t0 ∧ T†)⁻).

    Raises
    ------
    NoCensoringInformation
        A subject's follow-up ends in a transient state without a censoring mark.
    WeightOutOfSupport
        ``t0`` lies beyond the follow-up or Ĝ has dropped to zero.
    """
    _check_no_delayed_entry(dataset)
    s = _summaries(dataset)
    bad = ~s.absorbed & ~s.censored
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NoCensoringInformation(
            "follow-up ends in a transient state without a censoring record",
            subject=str(dataset.subject_ids[i]))
    if t0 > s.exit_time.max():
        raise WeightOutOfSupport(f"t0={t0} exceeds the last follow-up time", t0=float(t0))
    u = np.where(s.absorbed, np.minimum(s.exit_time, t0), t0)
    responder = np.where(s.absorbed, True, s.exit_time >= t0)
    times, G = censoring_survival(dataset)
    g = _G_minus(times, G, u)
    if np.any(responder & (g <= 0)):
        raise WeightOutOfSupport("censoring survival is zero before t0", t0=float(t0))
    return np.where(responder, 1.0 / np.where(g > 0, g, 1.0), 0.0)


def baseline_covariates(dataset: EpisodeDataset, names=None) -> np.ndarray:
    names = dataset.covariate_names if names is None else tuple(names)
    first = np.r_[True, dataset.subject_code[1:] != dataset.subject_code[:-1]]
    X = np.column_stack([dataset.covariate(nm)[first] for nm in names]) if names \
        else np.zeros((dataset.n_subjects, 0))
    out = np.empty_like(X)
    out[dataset.subject_code[first]] = X
    return out


def fit_direct_binomial(dataset: EpisodeDataset, state, t0: float, covariates=(),
                        link="logit", working_variance="independence") -> GeeFit:
    """IPCW-weighted GEE for I(Z(t0) = k) among subjects observed through t0 ∧ T†.

    The sandwich ignores the estimation of the censoring distribution.
    """
    k = dataset.state_space.index(state)
    w = ipcw_weights(dataset, t0)
    z = state_at(dataset, t0)
    y = np.where(w > 0, (z == k).astype(float), 0.0)
    X = baseline_covariates(dataset, covariates)
    D, names = _design(X, len(y), covariates)
    beta, cov, it, res = solve_gee(y, D, link, weights=w, working_variance=working_variance)
    return GeeFit(beta, cov, get_link(link).name, it, True, names, res)
