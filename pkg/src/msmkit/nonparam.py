"""Nelson-Aalen, Aalen-Johansen and the functionals built on them.

All estimators share one engine: per-subject weights (a batch of weight
vectors, shape ``(B, n_subjects)``) are turned into weighted event counts
``dN`` and risk-set sizes ``Y`` at the distinct transition times, and the
product integral of ``I + dΛ`` is accumulated over those times. A batch of
ones is the ordinary estimator; multinomial counts give bootstrap
replicates; ``1 - e_i`` gives exact leave-one-out estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import EpisodeDataset, at_risk_counts
from .errors import (
    InconsistentFollowingSet,
    InvalidLevel,
    NeverAtRisk,
    TauOutOfRange,
)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function; ``base`` is its value before the first jump.

    ``increments`` keeps the exact jump sizes so that quantities rebuilt from
    the curve (e.g. a product integral from cumulative hazards) reproduce the
    direct computation bit for bit.
    """

    times: np.ndarray
    values: np.ndarray
    variances: np.ndarray | None = None
    base: float = 0.0
    horizon: float | None = None
    increments: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.increments is None:
            object.__setattr__(self, "increments", np.diff(np.r_[self.base, self.values]))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("step times must be strictly increasing")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        out = np.where(idx > 0, self.values[np.maximum(idx - 1, 0)] if len(self.values) else 0.0,
                       self.base)
        return out if out.ndim else float(out)

    def variance(self, t):
        if self.variances is None:
            raise ValueError("no variance attached to this curve")
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        v = np.where(idx > 0, self.variances[np.maximum(idx - 1, 0)] if len(self.times) else 0.0, 0.0)
        return v if v.ndim else float(v)

    def confidence(self, t=None, level=0.95, log=False):
        """Pointwise intervals: estimate ± z·SE floored at 0, or log-transformed."""
        t = self.times if t is None else np.asarray(t, dtype=float)
        est = np.asarray(self(t), dtype=float)
        se = np.sqrt(np.asarray(self.variance(t), dtype=float))
        z = stats.norm.ppf(0.5 + level / 2)
        if log:
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.exp(np.where(est > 0, z * se / est, 0.0))
            return est / f, est * f
        return np.maximum(est - z * se, 0.0), est + z * se

    def integral(self, tau: float, start: float = 0.0) -> float:
        """Exact ∫_(start, tau] of the step curve."""
        if tau < start or (self.horizon is not None and tau > self.horizon + 1e-12):
            raise TauOutOfRange(f"tau={tau} outside the curve support", tau=tau,
                                horizon=self.horizon)
        knots = self.times[(self.times > start) & (self.times < tau)]
        edges = np.r_[start, knots, tau]
        heights = np.asarray(self(edges[:-1]), dtype=float)
        return float(np.sum(heights * np.diff(edges)))

    def to_rows(self, level=0.95, log=False):
        rows = []
        if self.variances is not None:
            lo, hi = self.confidence(level=level, log=log)
        else:
            lo = hi = [None] * len(self.times)
        for t, v, a, b in zip(self.times, self.values, lo, hi):
            rows.append({"time": float(t), "estimate": float(v),
                         "lower": None if a is None else float(a),
                         "upper": None if b is None else float(b)})
        return rows


@dataclass(frozen=True)
class MatrixPath:
    s: float
    grid: np.ndarray
    matrices: np.ndarray  # (len(grid), K, K)
    diagnostics: list = field(default_factory=list)

    def at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        if i < 0:
            raise ValueError("time precedes the grid")
        return self.matrices[i]


@dataclass(frozen=True)
class Occupancy:
    """State-occupancy curves initial·P̂(s, t) as exact step functions plus grid values."""

    grid: np.ndarray
    probs: np.ndarray           # (len(grid), K)
    times: np.ndarray           # jump times of the step curves
    values: np.ndarray          # (len(times), K)
    initial: np.ndarray

    def curve(self, state: int) -> StepFunction:
        return StepFunction(self.times, self.values[:, state], base=float(self.initial[state]),
                            horizon=float(self.grid[-1]))

    def __getitem__(self, state):
        return self.probs[:, state]


# ---------------------------------------------------------------- engine

@dataclass
class _Counts:
    times: np.ndarray   # (m,)
    dN: np.ndarray      # (m, B, K, K)
    Y: np.ndarray       # (m, B, K)


def _event_index(dataset: EpisodeDataset, transitions=None):
    ev = dataset.to_state >= 0
    if transitions is not None:
        keep = np.zeros(len(dataset), dtype=bool)
        for k, l in transitions:
            keep |= (dataset.from_state == k) & (dataset.to_state == l)
        ev &= keep
    times = np.unique(dataset.tstop[ev])
    return ev, times


def _weighted_counts(dataset: EpisodeDataset, weights=None, transitions=None) -> _Counts:
    K = dataset.state_space.size
    ev, times = _event_index(dataset, transitions)
    m = len(times)
    if weights is None:
        W = np.ones((1, dataset.n_subjects))
    else:
        W = np.atleast_2d(np.asarray(weights, dtype=float))
    B = W.shape[0]
    dN = np.zeros((m, B, K, K))
    u = np.searchsorted(times, dataset.tstop[ev])
    np.add.at(dN, (u, slice(None), dataset.from_state[ev], dataset.to_state[ev]),
              W[:, dataset.subject_code[ev]].T)
    Y = np.zeros((m, B, K))
    for k in range(K):
        sel = dataset.from_state == k
        if not sel.any() or m == 0:
            continue
        if weights is None:
            Y[:, 0, k] = at_risk_counts(dataset, k, times)
            continue
        starts, stops = dataset.tstart[sel], dataset.tstop[sel]
        wk = W[:, dataset.subject_code[sel]]
        o1, o2 = np.argsort(starts, kind="stable"), np.argsort(stops, kind="stable")
        c1 = np.concatenate([np.zeros((B, 1)), np.cumsum(wk[:, o1], axis=1)], axis=1)
        c2 = np.concatenate([np.zeros((B, 1)), np.cumsum(wk[:, o2], axis=1)], axis=1)
        i1 = np.searchsorted(starts[o1], times, side="left")
        i2 = np.searchsorted(stops[o2], times, side="left")
        Y[:, :, k] = (c1[:, i1] - c2[:, i2]).T
    return _Counts(times, dN, Y)


def _hazard_increments(c: _Counts, diagnostics=None, strict=False) -> np.ndarray:
    """dΛ (m, B, K, K) with off-diagonal dN/Y and zero row sums."""
    Y = c.Y[..., None]
    pending = (c.dN.sum(axis=3, keepdims=True) > 0) & (Y <= 0)
    if pending.any():
        bad = np.argwhere(pending[..., 0])
        if strict:
            u, _, k = bad[0]
            raise NeverAtRisk(f"events out of state {k} at t={c.times[u]} with empty risk set",
                              time=float(c.times[u]), state=int(k))
        if diagnostics is not None:
            for u, b, k in bad:
                diagnostics.append({"kind": "empty_risk_set", "time": float(c.times[u]),
                                    "state": int(k), "replicate": int(b)})
    with np.errstate(divide="ignore", invalid="ignore"):
        dL = np.where((Y > 0) & ~pending, c.dN / np.where(Y > 0, Y, 1.0), 0.0)
    K = dL.shape[-1]
    idx = np.arange(K)
    dL[..., idx, idx] = 0.0
    dL[..., idx, idx] = -dL.sum(axis=-1)
    return dL


def product_integral(times, dL, s, grid, integrate_to=None, initial=None):
    """Accumulate Π_(s,t] (I + dΛ(u)) and report it at ``grid``.

    ``dL`` has shape ``(m, B, K, K)``. With ``initial`` (shape ``(B, K)`` or
    ``(K,)``) only the row vector initial·P is propagated. When
    ``integrate_to`` is given, the exact integral of the propagated quantity
    over ``(s, integrate_to]`` is returned as well.
    """
    times = np.asarray(times, dtype=float)
    grid = np.asarray(grid, dtype=float)
    m, B, K, _ = dL.shape
    if initial is None:
        cur = np.broadcast_to(np.eye(K), (B, K, K)).copy()
    else:
        cur = np.broadcast_to(np.asarray(initial, dtype=float), (B, K)).copy()
    out = np.empty((len(grid),) + cur.shape)
    eye = np.eye(K)
    keep = (times > s)
    order = np.flatnonzero(keep)
    gi = 0
    integral = np.zeros_like(cur) if integrate_to is not None else None
    last_t = s
    for u in order:
        t = times[u]
        while gi < len(grid) and grid[gi] < t:
            out[gi] = cur
            gi += 1
        if integral is not None and last_t < integrate_to:
            integral += cur * (min(t, integrate_to) - last_t)
            last_t = min(t, integrate_to)
        M = eye + dL[u]
        if initial is None:
            cur = cur @ M
        else:
            cur = np.einsum("bk,bkl->bl", cur, M)
        np.clip(cur, 0.0, 1.0, out=cur)
    while gi < len(grid):
        out[gi] = cur
        gi += 1
    if integral is not None and last_t < integrate_to:
        integral += cur * (integrate_to - last_t)
    return out, integral


def _path_values(times, dL, s, initial):
    """Occupancy row after each jump time > s (for exact step curves)."""
    keep = times > s
    t = times[keep]
    vals, _ = product_integral(times, dL, s, t, initial=initial)
    return t, vals


# ---------------------------------------------------------------- estimators

def nelson_aalen(dataset: EpisodeDataset, transition) -> StepFunction:
    """Cumulative ``k -> l`` intensity with variance Σ dN/Y²."""
    k, l = dataset.state_space.check_transition(transition)
    if not np.any(dataset.from_state == k):
        raise NeverAtRisk(f"no subject is ever at risk in state {k}", state=k)
    mask = (dataset.from_state == k) & (dataset.to_state == l)
    times, counts = np.unique(dataset.tstop[mask], return_counts=True)
    Y = at_risk_counts(dataset, k, times)
    if np.any(Y <= 0):
        raise NeverAtRisk("empty risk set at an event time", state=k)
    inc = counts / Y
    var = np.cumsum(counts / Y**2)
    return StepFunction(times, np.cumsum(inc), var, increments=inc)


def cumulative_hazards(dataset: EpisodeDataset) -> dict:
    return {tr: nelson_aalen(dataset, tr) for tr in dataset.state_space.transitions
            if np.any(dataset.from_state == tr[0])}


def aalen_johansen(dataset: EpisodeDataset, s: float = 0.0, grid=None) -> MatrixPath:
    """Transition-probability matrices P̂(s, t) at each grid time."""
    grid = _check_grid(dataset, s, grid)
    c = _weighted_counts(dataset)
    diag = []
    dL = _hazard_increments(c, diag)
    mats, _ = product_integral(c.times, dL, s, grid)
    return MatrixPath(float(s), grid, mats[:, 0], diag)


def aalen_johansen_from_cumhaz(cumhaz: dict, n_states: int, s: float = 0.0, grid=None,
                               scale: dict | None = None) -> MatrixPath:
    """Product integral built from step-function cumulative intensities.

    ``cumhaz`` maps ``(k, l)`` to a :class:`StepFunction`; ``scale`` optionally
    multiplies each transition's increments (covariate-specific predictions).
    """
    all_t = np.unique(np.concatenate([f.times for f in cumhaz.values()] or [np.zeros(0)]))
    K = n_states
    dL = np.zeros((len(all_t), 1, K, K))
    for (k, l), f in cumhaz.items():
        u = np.searchsorted(all_t, f.times)
        inc = f.increments if scale is None else f.increments * scale.get((k, l), 1.0)
        dL[u, 0, k, l] = inc
    idx = np.arange(K)
    dL[..., idx, idx] = -dL.sum(axis=-1)
    if grid is None:
        grid = np.r_[s, all_t[all_t > s]]
    grid = np.asarray(grid, dtype=float)
    mats, _ = product_integral(all_t, dL, s, grid)
    return MatrixPath(float(s), grid, mats[:, 0])


def _check_grid(dataset, s, grid):
    if grid is None:
        t = np.unique(dataset.tstop[dataset.to_state >= 0])
        grid = np.r_[s, t[t > s]]
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be increasing")
    if len(grid) and grid[0] < s:
        raise ValueError("grid must start at or after s")
    return grid


def _initial_vector(dataset, initial):
    K = dataset.state_space.size
    if initial is None:
        v = np.zeros(K)
        v[0] = 1.0
        return v
    if np.isscalar(initial):
        v = np.zeros(K)
        v[dataset.state_space.index(initial)] = 1.0
        return v
    v = np.asarray(initial, dtype=float)
    if v.shape != (K,) or abs(v.sum() - 1.0) > 1e-12 or np.any(v < 0):
        raise ValueError("initial distribution must be a probability vector over the states")
    return v


def occupancy(dataset: EpisodeDataset, grid, initial=None, s: float = 0.0) -> Occupancy:
    """State-occupancy probabilities ``initial · P̂(s, t)`` on ``grid``."""
    grid = _check_grid(dataset, s, grid)
    init = _initial_vector(dataset, initial)
    c = _weighted_counts(dataset)
    dL = _hazard_increments(c)
    probs, _ = product_integral(c.times, dL, s, grid, initial=init)
    keep = (c.times > s) & (c.times <= grid[-1])
    t = c.times[keep]
    vals, _ = product_integral(c.times, dL, s, t, initial=init)
    return Occupancy(grid, probs[:, 0], t, vals[:, 0] if len(t) else np.zeros((0, len(init))),
                     init)


def cumulative_incidence(dataset: EpisodeDataset, target, following=(), grid=None,
                         initial=None) -> StepFunction:
    """Probability of having entered ``target`` by t: Σ p̂_j over target and its successors."""
    ss = dataset.state_space
    k = ss.index(target)
    follow = {ss.index(j) for j in following}
    bad = follow - ss.reachable(k)
    if bad:
        raise InconsistentFollowingSet(
            f"states {sorted(bad)} cannot be entered after a sojourn in {ss.labels[k]}",
            states=sorted(bad))
    if grid is None:
        grid = _check_grid(dataset, 0.0, None)
    occ = occupancy(dataset, grid, initial)
    members = sorted({k} | follow)
    init = float(sum(occ.initial[j] for j in members))
    return StepFunction(occ.times, occ.values[:, members].sum(axis=1), base=init,
                        horizon=float(occ.grid[-1]))


def restricted_mean_sojourn(curve: StepFunction, tau: float, start: float = 0.0) -> float:
    """Exact integral of an occupancy step curve over ``(start, tau]``."""
    return curve.integral(tau, start)


# ---------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class Bands:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    replicates: int


def occupancy_estimator(state, initial=None, s=0.0):
    """Weighted estimator of p̂_state(t); usable with :func:`bootstrap_bands`."""
    def est(dataset, grid, weights):
        k = dataset.state_space.index(state)
        init = _initial_vector(dataset, initial)
        c = _weighted_counts(dataset, weights)
        probs, _ = product_integral(c.times, _hazard_increments(c), s, grid, initial=init)
        return probs[:, :, k].T
    return est


def cif_estimator(target, following=(), initial=None):
    def est(dataset, grid, weights):
        ss = dataset.state_space
        members = sorted({ss.index(target)} | {ss.index(j) for j in following})
        init = _initial_vector(dataset, initial)
        c = _weighted_counts(dataset, weights)
        probs, _ = product_integral(c.times, _hazard_increments(c), 0.0, grid, initial=init)
        return probs[:, :, members].sum(axis=2).T
    return est


def transition_probability_estimator(k, l, s=0.0):
    def est(dataset, grid, weights):
        c = _weighted_counts(dataset, weights)
        mats, _ = product_integral(c.times, _hazard_increments(c), s, grid)
        return mats[:, :, k, l].T
    return est


def cumhaz_estimator(k, l):
    def est(dataset, grid, weights):
        c = _weighted_counts(dataset, weights, transitions=[(k, l)])
        dL = _hazard_increments(c)[:, :, k, l]  # (m, B)
        cum = np.cumsum(dL, axis=0)
        idx = np.searchsorted(c.times, grid, side="right") - 1
        out = np.where(idx[:, None] >= 0, cum[np.maximum(idx, 0)], 0.0)
        return out.T
    return est


def replicate_weights(n: int, B: int, seed: int) -> np.ndarray:
    """Multinomial subject counts; replicate b draws from a generator seeded by (seed, b)."""
    W = np.empty((B, n))
    p = np.full(n, 1.0 / n)
    for b in range(B):
        rng = np.random.default_rng([int(seed), b])
        W[b] = rng.multinomial(n, p)
    return W


def bootstrap_bands(dataset: EpisodeDataset, estimator, grid, B: int = 200, seed: int = 0,
                    level: float = 0.95, chunk: int = 250) -> Bands:
    """Pointwise percentile bands from resampling subjects with replacement.

    ``estimator(dataset, grid, weights)`` must return an array of shape
    ``(len(weights), len(grid))``; see :func:`occupancy_estimator` and friends.
    """
    if not 0 < level < 1:
        raise InvalidLevel(f"level must lie in (0, 1), got {level}", level=level)
    if B < 1:
        raise ValueError("B must be at least 1")
    grid = np.asarray(grid, dtype=float)
    W = replicate_weights(dataset.n_subjects, B, seed)
    reps = np.concatenate([estimator(dataset, grid, W[i:i + chunk])
                           for i in range(0, B, chunk)], axis=0)
    est = estimator(dataset, grid, np.ones((1, dataset.n_subjects)))[0]
    a = (1 - level) / 2
    lo, hi = np.quantile(reps, [a, 1 - a], axis=0)
    return Bands(grid, est, lo, hi, level, B)
