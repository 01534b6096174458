"""Per-transition Cox regression on counting-process data.

Each transition ``k -> l`` is fitted separately: the at-risk intervals are the
records occupying ``k``, events are the records ending in ``l``. Ties are
handled with Efron's approximation by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, stats

from .core import EpisodeDataset
from .errors import (
    DegenerateCovariate,
    InvalidRecord,
    MixedTimescale,
    MonotoneLikelihood,
    NoEvents,
    NotConverged,
)
from .nonparam import MatrixPath, StepFunction, aalen_johansen_from_cumhaz

EFRON, BRESLOW = "efron", "breslow"
TOTAL_TIME, CLOCK_RESET = "total", "reset"


@dataclass(frozen=True)
class CoxSpec:
    transition: tuple
    covariate_columns: tuple = ()
    ties: str = EFRON
    timescale: str = TOTAL_TIME

    def __post_init__(self):
        object.__setattr__(self, "transition", tuple(self.transition))
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        if self.ties not in (EFRON, BRESLOW):
            raise ValueError(f"ties must be 'efron' or 'breslow', got {self.ties!r}")
        if self.timescale not in (TOTAL_TIME, CLOCK_RESET):
            raise ValueError(f"timescale must be 'total' or 'reset', got {self.timescale!r}")


@dataclass
class CoxFit:
    spec: CoxSpec
    beta: np.ndarray
    covariance: np.ndarray
    loglik: float
    loglik_null: float
    iterations: int
    converged: bool
    score: np.ndarray
    n_events: int
    n_at_risk: int
    baseline: StepFunction | None = None
    robust_covariance: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def hazard_ratio(self) -> np.ndarray:
        return np.exp(self.beta)

    def confint(self, level=0.95):
        z = stats.norm.ppf(0.5 + level / 2)
        return np.exp(self.beta - z * self.se), np.exp(self.beta + z * self.se)

    @property
    def p_values(self) -> np.ndarray:
        """Two-sided Wald p-values from the model-based standard errors."""
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.beta / self.se
        return 2 * stats.norm.sf(np.abs(z))

    def table(self, level=0.95) -> list:
        lo, hi = self.confint(level)
        return [
            {"covariate": name, "coef": float(b), "se": float(s), "hr": float(np.exp(b)),
             "lower": float(a), "upper": float(c), "z": float(b / s), "p": float(p)}
            for name, b, s, a, c, p in zip(self.spec.covariate_columns, self.beta, self.se,
                                           lo, hi, self.p_values)
        ]


# ---------------------------------------------------------------- data prep

@dataclass
class _CoxData:
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    X: np.ndarray
    subject: np.ndarray
    times: np.ndarray            # distinct event times
    risk: np.ndarray             # (m, n) bool
    deaths: np.ndarray           # (m, n) bool: event at that time
    d: np.ndarray                # (m,) tie sizes


def _clock_reset(dataset: EpisodeDataset, k: int, sel: np.ndarray):
    """Shift each sojourn in ``k`` to time since entry into ``k``."""
    entry = np.empty(len(dataset))
    code = dataset.subject_code
    cur_entry = 0.0
    for i in range(len(dataset)):
        first = i == 0 or code[i - 1] != code[i]
        if first:
            if dataset.tstart[i] > 0 and dataset.from_state[i] != 0:
                if sel[i]:
                    raise InvalidRecord(
                        "entry time into the state cannot be reconstructed for a delayed-entry"
                        " subject first seen outside the initial state",
                        subject=str(dataset.subject[i]))
            cur_entry = 0.0 if dataset.from_state[i] == 0 else dataset.tstart[i]
        elif dataset.from_state[i] != dataset.from_state[i - 1] or dataset.to_state[i - 1] >= 0:
            cur_entry = dataset.tstart[i]
        entry[i] = cur_entry
    return dataset.tstart[sel] - entry[sel], dataset.tstop[sel] - entry[sel]


def _prepare(dataset: EpisodeDataset, spec: CoxSpec) -> _CoxData:
    k, l = dataset.state_space.check_transition(spec.transition)
    sel = dataset.from_state == k
    cols = [dataset.covariate_names.index(c) if c in dataset.covariate_names
            else _missing(c) for c in spec.covariate_columns]
    X = dataset.covariates[sel][:, cols] if cols else np.zeros((int(sel.sum()), 0))
    if spec.timescale == CLOCK_RESET:
        start, stop = _clock_reset(dataset, k, sel)
    else:
        start, stop = dataset.tstart[sel], dataset.tstop[sel]
    event = dataset.to_state[sel] == l
    if not event.any():
        raise NoEvents(f"no {k}->{l} transitions observed", transition=[k, l])
    for j, c in enumerate(spec.covariate_columns):
        if np.ptp(X[:, j]) == 0:
            raise DegenerateCovariate(f"covariate {c!r} is constant among subjects at risk",
                                      covariate=c)
    times, d = np.unique(stop[event], return_counts=True)
    risk = (start[None, :] < times[:, None]) & (times[:, None] <= stop[None, :])
    deaths = event[None, :] & (stop[None, :] == times[:, None])
    return _CoxData(start, stop, event, X, dataset.subject_code[sel], times, risk, deaths, d)


def _missing(c):
    from .errors import MissingColumn
    raise MissingColumn(f"unknown covariate {c!r}", column=c)


# ---------------------------------------------------------------- likelihood

def _tie_layout(cd: _CoxData, ties: str):
    """Flattened (event time, j) pairs with Efron fractions j/d."""
    d = cd.d
    if ties == BRESLOW:
        return np.arange(len(d)), np.zeros(len(d)), d.astype(float)
    idx = np.repeat(np.arange(len(d)), d)
    j = np.concatenate([np.arange(x) for x in d]) if len(d) else np.zeros(0)
    return idx, j / d[idx], np.ones(len(idx))


def partial_loglik(beta, cd: _CoxData, ties=EFRON, need=2):
    """Log partial likelihood, score and observed information at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    X = cd.X
    p = X.shape[1]
    eta = X @ beta
    w = np.exp(eta)
    R = cd.risk.astype(float)
    D = cd.deaths.astype(float)
    S0 = R @ w
    S0d = D @ w
    idx, frac, mult = _tie_layout(cd, ties)
    denom = S0[idx] - frac * S0d[idx]
    ll = float(np.sum(cd.deaths.astype(float) @ eta) - np.sum(mult * np.log(denom)))
    if need == 0:
        return ll, None, None
    wX = w[:, None] * X
    S1, S1d = R @ wX, D @ wX
    num1 = S1[idx] - frac[:, None] * S1d[idx]
    a = num1 / denom[:, None]
    score = cd.deaths.sum(axis=0) @ X - (mult[:, None] * a).sum(axis=0)
    if need == 1:
        return ll, score, None
    if p == 0:
        return ll, score, np.zeros((0, 0))
    wXX = (wX[:, :, None] * X[:, None, :]).reshape(len(w), p * p)
    S2, S2d = (R @ wXX).reshape(-1, p, p), (D @ wXX).reshape(-1, p, p)
    num2 = S2[idx] - frac[:, None, None] * S2d[idx]
    info = np.einsum("e,eij->ij", mult, num2 / denom[:, None, None]
                     - a[:, :, None] * a[:, None, :])
    return ll, score, info


def _score_residuals(beta, cd: _CoxData):
    """Per-record score residuals (Breslow form) for the sandwich variance."""
    X = cd.X
    w = np.exp(X @ beta)
    R = cd.risk.astype(float)
    S0 = R @ w
    xbar = (R @ (w[:, None] * X)) / S0[:, None]
    dl = cd.d / S0  # hazard increments
    resid = np.zeros_like(X)
    for j in range(len(cd.times)):
        ev = cd.deaths[j]
        resid[ev] += X[ev] - xbar[j]
        r = cd.risk[j]
        resid[r] -= w[r, None] * (X[r] - xbar[j]) * dl[j]
    return resid


# ---------------------------------------------------------------- fitting

def _newton_step(info, score):
    try:
        return linalg.solve(info, score, assume_a="sym")
    except linalg.LinAlgError:
        return np.linalg.lstsq(info, score, rcond=None)[0]


def fit_cox(dataset: EpisodeDataset, spec: CoxSpec, max_iter=100, robust=False,
            init=None) -> CoxFit:
    """Newton-Raphson maximisation of the log partial likelihood with step halving.

    Stops when max |score| < 1e-9 or the relative log-likelihood change is
    below 1e-10. Standard errors come from the inverse observed information.
    """
    cd = _prepare(dataset, spec)
    p = cd.X.shape[1]
    # centering leaves beta unchanged and keeps exp() well scaled
    center = cd.X.mean(axis=0) if p else np.zeros(0)
    cdc = replace(cd, X=cd.X - center)
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    ll, score, info = partial_loglik(beta, cdc, spec.ties)
    ll0 = partial_loglik(np.zeros(p), cdc, spec.ties, need=0)[0]
    converged = p == 0 or np.max(np.abs(score)) < 1e-9
    it = 0
    notes = []
    while not converged and it < max_iter:
        it += 1
        step = _newton_step(info, score)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new, s_new, i_new = partial_loglik(cand, cdc, spec.ties)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t /= 2
        else:
            raise NotConverged("step halving failed to increase the partial likelihood",
                               iterations=it)
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        beta, ll, score, info = cand, ll_new, s_new, i_new
        if np.max(np.abs(beta)) > 50 and rel > 0:
            raise MonotoneLikelihood("coefficients diverge while the likelihood keeps increasing",
                                     beta=beta.tolist())
        # on a monotone likelihood both criteria fire while Newton still takes unit
        # steps towards infinity, so a large pending step vetoes convergence
        pending = _newton_step(info, score)
        converged = ((np.max(np.abs(score)) < 1e-9 or rel < 1e-10)
                     and np.max(np.abs(pending)) < 1e-4 * (1 + np.max(np.abs(beta))))
    if converged and p:
        # one last Newton step is nearly free and polishes beta to machine precision
        cand = beta + _newton_step(info, score)
        ll_new, s_new, i_new = partial_loglik(cand, cdc, spec.ties)
        if np.isfinite(ll_new) and ll_new >= ll:
            beta, ll, score, info = cand, ll_new, s_new, i_new
    if not converged:
        raise NotConverged(f"no convergence after {max_iter} Newton iterations",
                           iterations=it)
    if p:
        ev = np.linalg.eigvalsh(info)
        if ev.min() <= 1e-12 * max(ev.max(), 1.0):
            # the partial likelihood flattened out in floating point before |beta| reached 50
            if np.max(np.abs(beta)) > 20:
                raise MonotoneLikelihood("information vanished while coefficients drift to"
                                         " infinity", beta=beta.tolist())
            raise NotConverged("observed information is singular (collinear covariates?)",
                               iterations=it)
        cov = linalg.inv(info)
        cov = (cov + cov.T) / 2
    else:
        cov = np.zeros((0, 0))
    fit = CoxFit(spec, beta, cov, ll, ll0, it, True, score, int(cd.event.sum()),
                 len(np.unique(cd.subject)), notes=notes)
    if robust and p:
        U = _score_residuals(beta, cdc)
        by_subject = np.zeros((cd.subject.max() + 1, p))
        np.add.at(by_subject, cd.subject, U)
        fit.robust_covariance = cov @ (by_subject.T @ by_subject) @ cov
    fit.baseline = _breslow(beta, cd)
    return fit


def _breslow(beta, cd: _CoxData) -> StepFunction:
    w = np.exp(cd.X @ beta) if cd.X.shape[1] else np.ones(len(cd.start))
    denom = cd.risk.astype(float) @ w if cd.X.shape[1] else cd.risk.sum(axis=1).astype(float)
    inc = cd.d / denom
    var = np.cumsum(cd.d / denom**2)
    return StepFunction(cd.times, np.cumsum(inc), var, increments=inc)


def baseline_cumhaz(fit: CoxFit, dataset: EpisodeDataset, spec: CoxSpec | None = None,
                    beta=None) -> StepFunction:
    """Breslow cumulative baseline: jumps dN(t) / Σ_risk exp(Xᵀβ)."""
    spec = spec or fit.spec
    if not fit.converged:
        raise NotConverged("fit did not converge")
    cd = _prepare(dataset, spec)
    b = fit.beta if beta is None else np.asarray(beta, dtype=float)
    return _breslow(b, cd)


def fit_all(dataset: EpisodeDataset, covariates=(), ties=EFRON, timescale=TOTAL_TIME) -> dict:
    """Independent fits for every allowed transition with at least one event."""
    out = {}
    for tr in dataset.state_space.transitions:
        sel = (dataset.from_state == tr[0]) & (dataset.to_state == tr[1])
        if sel.any():
            out[tr] = fit_cox(dataset, CoxSpec(tr, tuple(covariates), ties, timescale))
    return out


def predict_matrix(fits: dict, profile, n_states: int, s: float = 0.0, grid=None,
                   zero=()) -> MatrixPath:
    """Covariate-specific P(s, t | x) by product integration of scaled Breslow jumps.

    ``profile`` maps covariate names to values (or is a vector applied to
    every fit in column order). Transitions listed in ``zero`` are declared to
    have zero intensity.
    """
    cumhaz, scale = {}, {}
    for tr, fit in fits.items():
        if fit.spec.timescale != TOTAL_TIME:
            raise MixedTimescale("clock-reset fits cannot be combined into a Markov matrix",
                                 transition=list(tr))
        if fit.baseline is None:
            raise NotConverged("fit has no baseline")
        names = fit.spec.covariate_columns
        if isinstance(profile, dict):
            x = np.array([float(profile.get(n, 0.0)) for n in names])
        else:
            x = np.asarray(profile, dtype=float).reshape(-1)[: len(names)]
        cumhaz[tuple(tr)] = fit.baseline
        scale[tuple(tr)] = float(np.exp(x @ fit.beta)) if len(names) else 1.0
    del zero  # zero-intensity transitions simply contribute no increments
    return aalen_johansen_from_cumhaz(cumhaz, n_states, s, grid, scale)


def forest_rows(fits: dict, state_labels, level=0.95) -> list:
    """Rows (transition, covariate, hr, lower, upper) for a forest plot."""
    rows = []
    for (k, l), fit in fits.items():
        for r in fit.table(level):
            rows.append({"transition": f"{state_labels[k]} -> {state_labels[l]}",
                         "covariate": r["covariate"], "hr": r["hr"], "lower": r["lower"],
                         "upper": r["upper"]})
    return rows
