"""Shared gamma-frailty illness-death model with piecewise-constant baselines.

Conditional on a frailty ``ω ~ Gamma(mean 1, variance θ)`` the three
intensities are ``ω λ_kl(t) exp(xᵀβ_kl)`` for ``kl ∈ {01, 02, 12'}``, all on
the study clock; the post-illness hazard is left-truncated at the illness
time. Integrating ω out gives, per subject with ``D`` observed events and
total conditional cumulative hazard ``H``,

    Σ log(hazards at events) + Σ_{j<D} log(1 + jθ) − (1/θ + D) log(1 + θH).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._optim import minimize, numeric_hessian
from .core import EpisodeDataset, read_delimited
from .errors import (
    ConvergenceError,
    InvalidRecord,
    InvalidTransition,
    MissingColumn,
    NonFiniteLikelihood,
    NoEvents,
    NotConverged,
)

TRANSITIONS = ("01", "02", "12")


class ThetaBoundary(ConvergenceError):
    code = "theta_boundary"


# ---------------------------------------------------------------- data

@dataclass
class IllnessDeathData:
    """Observed illness-death data: (W1, W2, δ1, δ2, δ3, X) per subject.

    ``w1`` is the illness time or the end of the illness-free follow-up,
    ``w2`` the end of post-illness follow-up (0 without illness).
    """

    id: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    X: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        self.id = np.asarray(self.id)
        n = len(self.id)
        self.w1, self.w2 = (np.asarray(a, dtype=float) for a in (self.w1, self.w2))
        self.d1, self.d2, self.d3 = (np.asarray(a, dtype=int) for a in (self.d1, self.d2, self.d3))
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        self.covariate_names = tuple(self.covariate_names) or tuple(
            f"x{j + 1}" for j in range(self.X.shape[1]))
        for a in (self.w1, self.w2, self.d1, self.d2, self.d3):
            if len(a) != n:
                raise InvalidRecord("illness-death columns differ in length")
        for nm, d in (("delta1", self.d1), ("delta2", self.d2), ("delta3", self.d3)):
            if np.any((d != 0) & (d != 1)):
                raise InvalidRecord(f"{nm} must be 0 or 1")
        checks = [
            (self.d1 * self.d2 != 0, "delta1 and delta2 cannot both be 1"),
            (self.d3 > self.d1, "delta3 requires delta1"),
            ((self.d1 == 1) & ~(self.w2 > self.w1), "w2 must exceed w1 after illness"),
            ((self.d1 == 0) & (self.w2 != 0), "w2 must be 0 without illness"),
            (~(self.w1 > 0), "w1 must be positive"),
        ]
        for bad, msg in checks:
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                raise InvalidRecord(msg, subject=str(self.id[i]))

    def __len__(self):
        return len(self.id)

    @property
    def n_events(self) -> np.ndarray:
        return self.d1 + self.d2 + self.d3

    def counts(self) -> dict:
        return {"subjects": len(self), "illness": int(self.d1.sum()),
                "death_without_illness": int(self.d2.sum()),
                "death_after_illness": int(self.d3.sum())}

    def select(self, names) -> np.ndarray:
        idx = []
        for nm in names:
            if nm not in self.covariate_names:
                raise MissingColumn(f"unknown covariate {nm!r}", column=nm)
            idx.append(self.covariate_names.index(nm))
        return self.X[:, idx]


def load_illness_death(path, covariates=None) -> IllnessDeathData:
    """Read columns id, w1, w2, delta1, delta2, delta3 and the named covariates."""
    df = read_delimited(path)
    need = ["id", "w1", "w2", "delta1", "delta2", "delta3"]
    for c in need:
        if c not in df.columns:
            raise MissingColumn(f"column {c!r} not found", column=c)
    if covariates is None:
        covariates = [c for c in df.columns if c not in need]
    for c in covariates:
        if c not in df.columns:
            raise MissingColumn(f"column {c!r} not found", column=c)
    X = df[list(covariates)].to_numpy(float) if covariates else np.zeros((len(df), 0))
    return IllnessDeathData(df["id"].to_numpy(), df["w1"], df["w2"], df["delta1"],
                            df["delta2"], df["delta3"], X, covariates)


def from_episodes(dataset: EpisodeDataset) -> IllnessDeathData:
    """Convert counting-process illness-death records (states 0, 1, 2, 2') without delayed entry."""
    ss = dataset.state_space
    if ss.size != 4 or set(ss.allowed) != {(0, 1), (0, 2), (1, 3)}:
        raise InvalidTransition("expected the illness-death space 0->1, 0->2, 1->2'")
    n = dataset.n_subjects
    w1, w2 = np.zeros(n), np.zeros(n)
    d1, d2, d3 = (np.zeros(n, dtype=int) for _ in range(3))
    first = np.r_[True, dataset.subject_code[1:] != dataset.subject_code[:-1]]
    X = np.zeros((n, len(dataset.covariate_names)))
    X[dataset.subject_code[first]] = dataset.covariates[first]
    for i in range(len(dataset)):
        c = dataset.subject_code[i]
        if dataset.from_state[i] == 0:
            if first[i] and dataset.tstart[i] > 0:
                raise InvalidRecord("delayed entry is not supported",
                                    subject=str(dataset.subject[i]))
            w1[c] = dataset.tstop[i]
            d1[c] = int(dataset.to_state[i] == 1)
            d2[c] = int(dataset.to_state[i] == 2)
        else:
            w2[c] = dataset.tstop[i]
            d3[c] = int(dataset.to_state[i] == 3)
    lone = (d1 == 1) & (w2 <= w1)
    if lone.any():
        raise InvalidRecord("illness without post-illness follow-up",
                            subject=str(dataset.subject_ids[np.flatnonzero(lone)[0]]))
    return IllnessDeathData(dataset.subject_ids, w1, w2, d1, d2, d3, X,
                            dataset.covariate_names)


# ---------------------------------------------------------------- model

def _cp(x):
    return tuple(float(c) for c in x)


@dataclass(frozen=True)
class FrailtySpec:
    """Cut points and covariates per transition ('01', '02', '12')."""

    cutpoints: dict = field(default_factory=lambda: {t: () for t in TRANSITIONS})
    covariate_columns: dict = field(default_factory=lambda: {t: () for t in TRANSITIONS})
    timescale: str = "total"

    def __post_init__(self):
        cp = self.cutpoints
        if not isinstance(cp, dict):
            cp = {t: cp for t in TRANSITIONS}
        cc = self.covariate_columns
        if not isinstance(cc, dict):
            cc = {t: cc for t in TRANSITIONS}
        cp = {t: _cp(cp.get(t, ())) for t in TRANSITIONS}
        for t, c in cp.items():
            if any(v <= 0 for v in c) or any(b <= a for a, b in zip(c, c[1:])):
                raise ValueError(f"cutpoints for {t} must be positive and increasing")
        object.__setattr__(self, "cutpoints", cp)
        object.__setattr__(self, "covariate_columns",
                           {t: tuple(cc.get(t, ())) for t in TRANSITIONS})
        if self.timescale != "total":
            raise ValueError("only the shared total-time clock is supported")

    def sizes(self):
        return [(len(self.cutpoints[t]) + 1, len(self.covariate_columns[t])) for t in TRANSITIONS]

    @property
    def n_params(self) -> int:
        return 1 + sum(b + p for b, p in self.sizes())


@dataclass
class FrailtyParams:
    log_theta: float
    log_lambda: dict
    beta: dict

    @property
    def theta(self) -> float:
        return float(np.exp(self.log_theta))

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.log_theta]] + [np.asarray(self.log_lambda[t]) for t in TRANSITIONS]
                              + [np.asarray(self.beta[t]) for t in TRANSITIONS])

    @classmethod
    def from_vector(cls, v, spec: FrailtySpec) -> "FrailtyParams":
        v = np.asarray(v, dtype=float)
        i = 1
        ll, bb = {}, {}
        for t, (nb, _) in zip(TRANSITIONS, spec.sizes()):
            ll[t] = v[i:i + nb]
            i += nb
        for t, (_, p) in zip(TRANSITIONS, spec.sizes()):
            bb[t] = v[i:i + p]
            i += p
        return cls(float(v[0]), ll, bb)

    def names(self, spec: FrailtySpec) -> list:
        out = ["log_theta"]
        for t, (nb, _) in zip(TRANSITIONS, spec.sizes()):
            out += [f"log_lambda[{t}, band {b}]" for b in range(nb)]
        for t in TRANSITIONS:
            out += [f"beta[{t}, {c}]" for c in spec.covariate_columns[t]]
        return out


def _overlap(cutpoints, a, b):
    """Length of (a, b] in each band, (n, bands)."""
    edges = np.concatenate([[0.0], cutpoints, [np.inf]])
    lo = np.maximum(a[:, None], edges[None, :-1])
    hi = np.minimum(b[:, None], edges[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def _band_of(cutpoints, t):
    return np.searchsorted(np.asarray(cutpoints, float), t, side="left")


@dataclass
class _Design:
    X: dict       # transition -> (n, p)
    O: dict       # transition -> (n, bands) exposure
    E: dict       # transition -> (n, bands) event indicator in band
    d: dict       # transition -> (n,) event indicator
    D: np.ndarray


def _design(data: IllnessDeathData, spec: FrailtySpec) -> _Design:
    X, O, E, d = {}, {}, {}, {}
    zero = np.zeros(len(data))
    ill = data.d1 == 1
    spans = {"01": (zero, data.w1), "02": (zero, data.w1),
             "12": (np.where(ill, data.w1, 0.0), np.where(ill, data.w2, 0.0))}
    events = {"01": (data.d1, data.w1), "02": (data.d2, data.w1), "12": (data.d3, data.w2)}
    for t in TRANSITIONS:
        cp = spec.cutpoints[t]
        X[t] = data.select(spec.covariate_columns[t]) if spec.covariate_columns[t] \
            else np.zeros((len(data), 0))
        O[t] = _overlap(cp, *spans[t])
        dd, tt = events[t]
        Ev = np.zeros((len(data), len(cp) + 1))
        Ev[np.arange(len(data)), _band_of(cp, tt)] = dd
        E[t], d[t] = Ev, dd.astype(float)
    return _Design(X, O, E, d, data.n_events.astype(float))


def _log1p_over_x(x):
    small = x < 1e-6
    xs = np.where(small, 0.0, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.log1p(xs) / np.where(small, 1.0, xs)
    return np.where(small, 1 - x / 2 + x * x / 3, big)


def _g(x):
    """(log1p(x)/x − 1/(1+x)) / x, continuous at 0."""
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    big = (np.log1p(xs) / xs - 1 / (1 + xs)) / xs
    ser = 0.5 - 2 * x / 3 + 3 * x**2 / 4 - 4 * x**3 / 5 + 5 * x**4 / 6
    return np.where(small, ser, big)


def _loglik_terms(params: FrailtyParams, des: _Design, theta=None, need_grad=True):
    theta = params.theta if theta is None else theta
    n = len(des.D)
    H = np.zeros(n)
    haz = np.zeros(n)
    parts = {}
    for t in TRANSITIONS:
        lam = np.exp(params.log_lambda[t])
        r = np.exp(des.X[t] @ params.beta[t]) if des.X[t].shape[1] else np.ones(n)
        base = des.O[t] @ lam
        H += r * base
        haz += des.E[t] @ params.log_lambda[t] + des.d[t] * (des.X[t] @ params.beta[t]
                                                              if des.X[t].shape[1] else 0.0)
        parts[t] = (lam, r, base)
    D = des.D
    x = theta * H
    jsum = np.zeros(n)
    jder = np.zeros(n)
    for j in range(1, int(D.max(initial=0))):
        on = D > j
        jsum += np.where(on, np.log1p(j * theta), 0.0)
        jder += np.where(on, j / (1 + j * theta), 0.0)
    contrib = haz + jsum - H * _log1p_over_x(x) - D * np.log1p(x)
    ll = float(contrib.sum())
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("frailty log-likelihood is not finite", theta=float(theta))
    if not need_grad:
        return ll, None, contrib
    dH = -(1 + D * theta) / (1 + x)
    dtheta = float(np.sum(jder + H * H * _g(x) - D * H / (1 + x)))
    g_ll, g_b = [], []
    for t in TRANSITIONS:
        lam, r, base = parts[t]
        g_ll.append(des.E[t].sum(axis=0) + (dH * r) @ (des.O[t] * lam))
        g_b.append(des.d[t] @ des.X[t] + (dH * r * base) @ des.X[t])
    return ll, (dtheta, g_ll, g_b), contrib


def frailty_loglik(params: FrailtyParams, data: IllnessDeathData, spec: FrailtySpec,
                   theta: float | None = None) -> float:
    """Marginal log-likelihood with the gamma frailty integrated out.

    ``theta`` overrides ``exp(log_theta)`` (``theta=0`` gives the frailty-free limit).
    """
    return _loglik_terms(params, _design(data, spec), theta, need_grad=False)[0]


def frailty_loglik_grad(params: FrailtyParams, data: IllnessDeathData, spec: FrailtySpec):
    """Log-likelihood and gradient in the parameter-vector order of :class:`FrailtyParams`."""
    ll, (dth, gl, gb), _ = _loglik_terms(params, _design(data, spec))
    return ll, np.concatenate([[dth * params.theta]] + gl + gb)


# ---------------------------------------------------------------- fitting

@dataclass
class FrailtyFit:
    params: FrailtyParams
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    spec: FrailtySpec
    boundary: bool = False
    score_at_zero: float = float("nan")
    notes: list = field(default_factory=list)

    @property
    def theta(self) -> float:
        return 0.0 if self.boundary else self.params.theta

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def status(self) -> str:
        return "no detectable frailty" if self.boundary else "ok"

    def table(self, level=0.95) -> list:
        z = stats.norm.ppf(0.5 + level / 2)
        rows = []
        for name, est, se in zip(self.params.names(self.spec), self.params.vector(), self.se):
            row = {"parameter": name, "estimate": float(est), "se": float(se)}
            if name.startswith(("log_", "beta")):
                row.update(exp=float(np.exp(est)), lower=float(np.exp(est - z * se)),
                           upper=float(np.exp(est + z * se)))
            rows.append(row)
        if self.boundary:
            rows[0].update(estimate=float("-inf"), exp=0.0, lower=float("nan"),
                           upper=float("nan"), se=float("nan"))
        return rows

    def to_dict(self) -> dict:
        return {"theta": self.theta, "status": self.status, "loglik": self.loglik,
                "converged": self.converged, "iterations": self.iterations,
                "score_at_zero": self.score_at_zero, "parameters": self.table(),
                "notes": list(self.notes)}


def _start(data, spec, des) -> np.ndarray:
    v = [np.log(0.5)]
    for t in TRANSITIONS:
        ev = des.E[t].sum(axis=0)
        ex = des.O[t].sum(axis=0)
        v.append(np.log(np.maximum(ev, 0.5) / np.maximum(ex, 1e-8)))
    for t in TRANSITIONS:
        v.append(np.zeros(len(spec.covariate_columns[t])))
    return np.concatenate([np.atleast_1d(a) for a in v])


def fit_frailty(data: IllnessDeathData, spec: FrailtySpec | None = None, max_iter=500,
                boundary_threshold=1e-6, on_boundary="flag") -> FrailtyFit:
    """Maximum marginal likelihood over (log θ, log λ, β) by BFGS.

    A score test at θ = 0 runs first: when the frailty-free fit has a
    non-positive θ-score the likelihood is maximised on the boundary and the
    result is returned with ``boundary=True`` ("no detectable frailty").
    The same happens when the interior fit ends with θ̂ below
    ``boundary_threshold``. ``on_boundary="raise"`` turns that outcome into
    :class:`ThetaBoundary`.
    """
    spec = spec or FrailtySpec()
    des = _design(data, spec)
    for t in TRANSITIONS:
        if des.d[t].sum() == 0:
            raise NoEvents(f"no events for transition {t}", transition=t)
    notes = []
    if np.sum(des.D >= 2) == 0:
        msg = "no subject has two or more events; theta is weakly identified"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    x0 = _start(data, spec, des)

    def fg(v):
        p = FrailtyParams.from_vector(v, spec)
        ll, (dth, gl, gb), _ = _loglik_terms(p, des)
        return -ll, -np.concatenate([[dth * p.theta]] + gl + gb)

    def fg0(v):
        p = FrailtyParams.from_vector(np.r_[0.0, v], spec)
        ll, (dth, gl, gb), _ = _loglik_terms(p, des, theta=0.0)
        return -ll, -np.concatenate(gl + gb)

    null = minimize(fg0, x0[1:], gtol=1e-6, maxiter=max_iter)
    p0 = FrailtyParams.from_vector(np.r_[0.0, null.x], spec)
    score0 = _loglik_terms(p0, des, theta=0.0)[1][0]

    def boundary_fit(reason):
        if on_boundary == "raise":
            raise ThetaBoundary("no detectable frailty", reason=reason, score=float(score0))
        if not null.converged:
            raise NotConverged("frailty-free fit did not converge")
        H = numeric_hessian(lambda v: fg0(v)[1], null.x)
        cov = np.zeros((len(x0), len(x0)))
        cov[0, 0] = np.nan
        cov[1:, 1:] = np.linalg.inv(H)
        return FrailtyFit(FrailtyParams.from_vector(np.r_[-np.inf, null.x], spec), cov,
                          -null.fun, True, null.iterations, spec, True, float(score0),
                          notes + [reason])

    if score0 <= 0:
        return boundary_fit("non-positive score for theta at zero")
    start = np.r_[np.log(max(score0 / max(np.sum(des.D), 1.0), 0.05)), null.x]
    res = minimize(fg, start, gtol=1e-6, maxiter=max_iter)
    if np.exp(res.x[0]) < boundary_threshold:
        return boundary_fit(f"theta estimate below {boundary_threshold}")
    if not res.converged:
        raise NotConverged("BFGS did not reach gradient max-norm 1e-6",
                           gradient_max=float(np.max(np.abs(res.jac))))
    H = numeric_hessian(lambda v: fg(v)[1], res.x)
    cov = np.linalg.inv(H)
    return FrailtyFit(FrailtyParams.from_vector(res.x, spec), (cov + cov.T) / 2, -res.fun, True,
                      res.iterations, spec, False, float(score0), notes)


# ---------------------------------------------------------------- marginal -> conditional

_ALIASES = {"01": "01", "02": "02", "12": "12", "12'": "12", (0, 1): "01", (0, 2): "02",
            (1, 2): "12", (1, 3): "12"}


def conditional_hazard_from_marginal(marginal_cumhaz: dict, beta: dict, theta: float, t: float,
                                     X, transition, entry: float = 0.0) -> float:
    """Multiplier α* turning a marginal baseline hazard into the conditional one.

    ``marginal_cumhaz`` maps '01', '02', '12' to baseline cumulative hazard
    callables; ``beta`` maps them to coefficient vectors. For the post-illness
    transition the cumulative hazard is taken over ``(entry, t]``.

        α*_0l(t|x)  = exp(xᵀβ_0l) · exp{θ Λ_0·(t|x)}
        α*_12'(t|x) = exp(xᵀβ_12') · exp{Λ_12'(t|x) θ/(1+θ)} / (1+θ)
    """
    key = _ALIASES.get(transition if not isinstance(transition, list) else tuple(transition))
    if key is None:
        raise InvalidTransition(f"unknown illness-death transition {transition!r}")
    if t < 0 or theta < 0:
        raise ValueError("require t >= 0 and theta >= 0")
    x = np.asarray(X, dtype=float).reshape(-1)

    def lin(k):
        b = np.asarray(beta.get(k, ()), dtype=float).reshape(-1)
        return float(x[: len(b)] @ b) if len(b) else 0.0

    if key in ("01", "02"):
        L0 = sum(float(marginal_cumhaz[k](t)) * np.exp(lin(k)) for k in ("01", "02"))
        return float(np.exp(lin(key)) * np.exp(theta * L0))
    L12 = (float(marginal_cumhaz["12"](t)) - float(marginal_cumhaz["12"](entry))) * np.exp(lin("12"))
    return float(np.exp(lin("12")) * np.exp(L12 * theta / (1 + theta)) / (1 + theta))
