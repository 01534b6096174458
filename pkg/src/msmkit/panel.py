"""Continuous-time Markov models for panel (intermittently observed) data.

Baseline intensities are piecewise constant between cut points and covariates
act multiplicatively, ``q_kl(t | x) = λ_kl,b · exp(xᵀβ_kl)`` for ``t`` in band
``b``. Transition probabilities over an interval are ordered products of
per-band matrix exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._optim import minimize, numeric_hessian
from .core import PanelDataset, StateSpace, validate_panel
from .errors import (
    ImpossibleTransitionObserved,
    InvalidGenerator,
    NonIdentifiable,
    NotConverged,
)

# ---------------------------------------------------------------- expm

_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
    129060195264000.0, 10559470521600.0, 670442572800.0, 33522128640.0, 1323241920.0,
    40840800.0, 960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def expm_batch(A: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack ``(..., n, n)`` by Padé-13 scaling and squaring.

    Each matrix gets its own scaling power from its 1-norm, so a batch mixing
    tiny and large arguments loses no accuracy on the tiny ones.
    """
    A = np.asarray(A, dtype=float)
    shape = A.shape
    n = shape[-1]
    A = A.reshape(-1, n, n)
    norm = np.abs(A).sum(axis=1).max(axis=1)
    with np.errstate(divide="ignore"):
        s = np.where(norm > _THETA13, np.ceil(np.log2(norm / _THETA13)), 0).astype(int)
    A = A / np.exp2(s)[:, None, None]
    b = _PADE13
    eye = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 \
        + b[0] * eye
    R = np.linalg.solve(V - U, V + U)
    for j in range(int(s.max(initial=0))):
        sel = s > j
        R[sel] = R[sel] @ R[sel]
    return R.reshape(shape)


def _check_generator(Q, tol=1e-10):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise InvalidGenerator("generator must be a square matrix", shape=list(Q.shape))
    if not np.all(np.isfinite(Q)):
        raise InvalidGenerator("generator has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise InvalidGenerator("negative off-diagonal intensity")
    scale = max(1.0, float(np.abs(Q).max()))
    if np.any(np.abs(Q.sum(axis=1)) > tol * scale):
        raise InvalidGenerator("generator rows must sum to zero",
                               row_sums=Q.sum(axis=1).tolist())
    return Q


def expm(Q, dt: float = 1.0) -> np.ndarray:
    """``exp(Q·dt)`` for a generator ``Q``; row-stochastic and non-negative.

    Raises
    ------
    InvalidGenerator
        If ``Q`` is not a valid intensity matrix or ``dt`` is negative.
    """
    Q = _check_generator(Q)
    if not np.isfinite(dt) or dt < 0:
        raise InvalidGenerator("duration must be finite and non-negative", dt=float(dt))
    if dt == 0:
        return np.eye(len(Q))
    P = expm_batch(Q * dt)
    return np.maximum(P, 0.0)


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class PanelSpec:
    cutpoints: tuple = ()
    covariate_columns: tuple = ()
    transitions: tuple | None = None
    init: np.ndarray | None = None

    def __post_init__(self):
        cp = tuple(float(c) for c in self.cutpoints)
        if any(c <= 0 for c in cp) or any(b <= a for a, b in zip(cp, cp[1:])):
            raise ValueError("cutpoints must be positive and strictly increasing")
        object.__setattr__(self, "cutpoints", cp)
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        if self.transitions is not None:
            object.__setattr__(self, "transitions",
                               tuple(tuple(int(x) for x in t) for t in self.transitions))

    @property
    def n_bands(self) -> int:
        return len(self.cutpoints) + 1


@dataclass
class PanelParams:
    """Log baseline intensities ``[transition, band]`` and coefficients ``[transition, covariate]``."""

    log_lambda: np.ndarray
    beta: np.ndarray
    transitions: tuple
    n_states: int
    cutpoints: tuple = ()

    def __post_init__(self):
        self.log_lambda = np.atleast_2d(np.asarray(self.log_lambda, dtype=float))
        self.beta = np.asarray(self.beta, dtype=float).reshape(len(self.transitions), -1)
        self.transitions = tuple(tuple(t) for t in self.transitions)
        self.cutpoints = tuple(self.cutpoints)
        if self.log_lambda.shape != (len(self.transitions), len(self.cutpoints) + 1):
            raise ValueError("log_lambda must have shape (transitions, bands)")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.log_lambda.ravel(), self.beta.ravel()])

    def with_vector(self, theta) -> "PanelParams":
        T, B = self.log_lambda.shape
        theta = np.asarray(theta, dtype=float)
        return PanelParams(theta[: T * B].reshape(T, B), theta[T * B:].reshape(T, -1),
                           self.transitions, self.n_states, self.cutpoints)

    def names(self, covariate_names=(), labels=None) -> list:
        lab = labels or [str(k) for k in range(self.n_states)]
        out = []
        for k, l in self.transitions:
            for b in range(self.log_lambda.shape[1]):
                out.append(f"log_lambda[{lab[k]}->{lab[l]}, band {b}]")
        for k, l in self.transitions:
            for c in covariate_names:
                out.append(f"beta[{lab[k]}->{lab[l]}, {c}]")
        return out


def _rates(params: PanelParams, X: np.ndarray) -> np.ndarray:
    """Intensities ``(n, transitions, bands)`` for covariate rows ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lin = X @ params.beta.T if params.beta.shape[1] else np.zeros((len(X), len(params.transitions)))
    return np.exp(params.log_lambda[None, :, :] + lin[:, :, None])


def build_generator(params: PanelParams, covariates=(), band: int = 0) -> np.ndarray:
    """Generator for one covariate vector in one band; diagonal is minus the row sum."""
    B = params.log_lambda.shape[1]
    if not 0 <= band < B:
        raise IndexError(f"band {band} out of range 0..{B - 1}")
    x = np.asarray(covariates, dtype=float).reshape(1, -1)
    if x.shape[1] != params.beta.shape[1]:
        x = np.zeros((1, params.beta.shape[1])) if x.size == 0 else x
    q = _rates(params, x)[0, :, band]
    Q = np.zeros((params.n_states, params.n_states))
    for (k, l), v in zip(params.transitions, q):
        Q[k, l] += v
    Q[np.diag_indices_from(Q)] = -Q.sum(axis=1)
    return Q


def _band_overlaps(cutpoints, t0, t1):
    """Length of each (t0, t1] inside each band; shape (m, bands)."""
    edges = np.concatenate([[-np.inf], np.asarray(cutpoints, float), [np.inf]])
    lo = np.maximum(t0[:, None], edges[None, :-1])
    hi = np.minimum(t1[:, None], edges[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def transition_probability(params: PanelParams, covariates, s: float, t: float) -> np.ndarray:
    """P(s, t | x): ordered product of per-band exponentials over (s, t]."""
    if t < s:
        raise ValueError("require s <= t")
    K = params.n_states
    P = np.eye(K)
    overlap = _band_overlaps(params.cutpoints, np.array([s]), np.array([t]))[0]
    for b, d in enumerate(overlap):
        if d > 0:
            P = P @ expm(build_generator(params, covariates, b), d)
    return P


# ---------------------------------------------------------------- likelihood

@dataclass
class _PanelWork:
    X: np.ndarray        # (m, p) covariates per pair
    s0: np.ndarray
    s1: np.ndarray
    overlap: np.ndarray  # (m, bands)


def _work(data: PanelDataset, spec_cov, cutpoints) -> _PanelWork:
    idx, t0, t1, s0, s1 = data.pairs()
    Xs = data.covariate_matrix(spec_cov) if spec_cov else np.zeros((len(data), 0))
    return _PanelWork(Xs[idx], s0, s1, _band_overlaps(cutpoints, t0, t1))


def _loglik_grad(params: PanelParams, w: _PanelWork, need_grad=True):
    """Log-likelihood and its analytic gradient.

    Derivatives of each band exponential come from the exponential of the
    block upper-triangular matrix ``[[A, G_1 .. G_T], [0, A], ...]`` whose first
    block row holds the Fréchet derivatives ``L(A, G_j)``.
    """
    m = len(w.s0)
    T = len(params.transitions)
    K = params.n_states
    B = params.log_lambda.shape[1]
    p = params.beta.shape[1]
    if m == 0:
        return 0.0, np.zeros(T * B + T * p)
    q = _rates(params, w.X)  # (m, T, B)
    kk = np.array([t[0] for t in params.transitions])
    ll_ = np.array([t[1] for t in params.transitions])
    basis = np.zeros((T, K, K))
    basis[np.arange(T), kk, ll_] += 1.0
    basis[np.arange(T), kk, kk] -= 1.0
    Ms, Ls = [], []
    for b in range(B):
        G = (q[:, :, b] * w.overlap[:, b, None])[:, :, None, None] * basis  # (m, T, K, K)
        A = G.sum(axis=1)
        if not need_grad:
            Ms.append(expm_batch(A))
            continue
        n = K * (T + 1)
        big = np.zeros((m, n, n))
        for j in range(T + 1):
            big[:, j * K:(j + 1) * K, j * K:(j + 1) * K] = A
        for j in range(T):
            big[:, :K, (j + 1) * K:(j + 2) * K] = G[:, j]
        E = expm_batch(big)
        Ms.append(E[:, :K, :K])
        Ls.append(np.stack([E[:, :K, (j + 1) * K:(j + 2) * K] for j in range(T)], axis=1))
    prefix = [np.broadcast_to(np.eye(K), (m, K, K))]
    for b in range(B - 1):
        prefix.append(prefix[-1] @ Ms[b])
    suffix = [None] * B
    acc = np.broadcast_to(np.eye(K), (m, K, K))
    for b in range(B - 1, -1, -1):
        suffix[b] = acc
        acc = Ms[b] @ acc
    P = acc
    r = np.arange(m)
    pij = P[r, w.s0, w.s1]
    if np.any(pij <= 0):
        bad = int(np.flatnonzero(pij <= 0)[0])
        raise ImpossibleTransitionObserved(
            "observed pair has zero probability under the model",
            **{"from": int(w.s0[bad]), "to": int(w.s1[bad])})
    ll = float(np.sum(np.log(pij)))
    if not need_grad:
        return ll, None
    dlam = np.zeros((T, B))
    dbeta = np.zeros((T, p))
    for b in range(B):
        row = prefix[b][r, w.s0, :]             # (m, K)
        col = suffix[b][r, :, w.s1]             # (m, K)
        d = np.einsum("mi,mtij,mj->mt", row, Ls[b], col) / pij[:, None]
        dlam[:, b] = d.sum(axis=0)
        dbeta += d.T @ w.X
    return ll, np.concatenate([dlam.ravel(), dbeta.ravel()])


def panel_loglik(params: PanelParams, data: PanelDataset, covariate_columns=None) -> float:
    """Σ over consecutive observation pairs of log P_{z(a_{r-1}), z(a_r)}(a_{r-1}, a_r | x)."""
    cov = data.covariate_names if covariate_columns is None else tuple(covariate_columns)
    if params.beta.shape[1] != len(cov):
        raise ValueError("beta columns do not match covariates")
    _check_pairs(data, params)
    return _loglik_grad(params, _work(data, cov, params.cutpoints), need_grad=False)[0]


def panel_loglik_grad(params: PanelParams, data: PanelDataset, covariate_columns=None):
    cov = data.covariate_names if covariate_columns is None else tuple(covariate_columns)
    _check_pairs(data, params)
    return _loglik_grad(params, _work(data, cov, params.cutpoints))


def _check_pairs(data: PanelDataset, params: PanelParams):
    ss = StateSpace(data.state_space.labels, data.state_space.absorbing,
                    frozenset(params.transitions))
    for f in validate_panel(PanelDataset(ss, data.subjects, data.covariate_names)):
        if f["kind"] == "impossible_transition":
            raise ImpossibleTransitionObserved(
                f"subject {f['subject']} moves {f['from']}->{f['to']}, which is unreachable",
                subject=f["subject"], time=f["time"], **{"from": f["from"], "to": f["to"]})


# ---------------------------------------------------------------- fitting

@dataclass
class PanelFit:
    params: PanelParams
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    spec: PanelSpec
    state_labels: tuple
    covariate_means: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def _z(self, level):
        return stats.norm.ppf(0.5 + level / 2)

    def coefficient_table(self, level=0.95) -> list:
        T, B = self.params.log_lambda.shape
        z = self._z(level)
        se = self.se[T * B:].reshape(T, -1)
        rows = []
        lab = self.state_labels
        for t, (k, l) in enumerate(self.params.transitions):
            for j, c in enumerate(self.spec.covariate_columns):
                b, s = self.params.beta[t, j], se[t, j]
                rows.append({"transition": f"{lab[k]} -> {lab[l]}", "covariate": c,
                             "coef": float(b), "se": float(s), "hr": float(np.exp(b)),
                             "lower": float(np.exp(b - z * s)), "upper": float(np.exp(b + z * s)),
                             "p": float(2 * stats.norm.sf(abs(b / s)))})
        return rows

    def intensity_table(self, level=0.95) -> list:
        """Per-band baseline intensities (covariates 0) with log-scale CIs, plus band ratios."""
        T, B = self.params.log_lambda.shape
        z = self._z(level)
        V = self.covariance
        edges = (0.0,) + self.spec.cutpoints
        rows = []
        lab = self.state_labels
        for t, (k, l) in enumerate(self.params.transitions):
            for b in range(B):
                i = t * B + b
                est, s = self.params.log_lambda[t, b], np.sqrt(max(V[i, i], 0))
                row = {"transition": f"{lab[k]} -> {lab[l]}", "band": b,
                       "from_time": edges[b],
                       "to_time": self.spec.cutpoints[b] if b < B - 1 else None,
                       "intensity": float(np.exp(est)), "lower": float(np.exp(est - z * s)),
                       "upper": float(np.exp(est + z * s))}
                if b > 0:
                    i0 = t * B
                    d = est - self.params.log_lambda[t, 0]
                    sd = np.sqrt(max(V[i, i] + V[i0, i0] - 2 * V[i, i0], 0))
                    row.update(ratio=float(np.exp(d)), ratio_lower=float(np.exp(d - z * sd)),
                               ratio_upper=float(np.exp(d + z * sd)))
                rows.append(row)
        return rows

    def to_dict(self, level=0.95) -> dict:
        return {"loglik": self.loglik, "converged": self.converged,
                "iterations": self.iterations, "cutpoints": list(self.spec.cutpoints),
                "covariates": list(self.spec.covariate_columns),
                "coefficients": self.coefficient_table(level),
                "intensities": self.intensity_table(level)}


def _initial_params(data: PanelDataset, transitions, spec: PanelSpec) -> PanelParams:
    """Crude start: transitions reached per unit time spent starting in ``k``."""
    ss = data.state_space
    K = ss.size
    _, t0, t1, s0, s1 = data.pairs()
    B = spec.n_bands
    lam = np.zeros((len(transitions), B))
    for i, (k, l) in enumerate(transitions):
        reach = ss.reachable(l) | {l}
        from_k = s0 == k
        n_ev = np.sum(from_k & np.isin(s1, list(reach)))
        expo = np.sum((t1 - t0)[from_k])
        lam[i, :] = np.log(max(n_ev, 0.5) / max(expo, 1e-8))
    p = len(spec.covariate_columns)
    return PanelParams(lam, np.zeros((len(transitions), p)), transitions, K, spec.cutpoints)


def _identifiability(data, w, transitions, B, labels):
    ss = data.state_space
    for t, (k, l) in enumerate(transitions):
        can = np.array([k == a or k in ss.reachable(a) for a in range(ss.size)])
        for b in range(B):
            if not np.any(can[w.s0] & (w.overlap[:, b] > 0)):
                raise NonIdentifiable(
                    f"no observation pair informs {labels[k]}->{labels[l]} in band {b}",
                    transition=[k, l], band=b)


def fit_panel(data: PanelDataset, spec: PanelSpec, max_iter: int = 500) -> PanelFit:
    """Maximum-likelihood fit by BFGS on (log λ, β) with the analytic gradient.

    Convergence requires a gradient max-norm below 1e-6; the covariance is the
    inverse of a central-difference Hessian of minus the log-likelihood.
    """
    transitions = spec.transitions or tuple(data.state_space.transitions)
    labels = data.state_space.labels
    probe = PanelParams(np.zeros((len(transitions), spec.n_bands)),
                        np.zeros((len(transitions), len(spec.covariate_columns))),
                        transitions, data.state_space.size, spec.cutpoints)
    _check_pairs(data, probe)
    w = _work(data, spec.covariate_columns, spec.cutpoints)
    _identifiability(data, w, transitions, spec.n_bands, labels)
    start = _initial_params(data, transitions, spec)
    if spec.init is not None:
        start = start.with_vector(np.asarray(spec.init, dtype=float))

    def f(theta):
        ll, g = _loglik_grad(start.with_vector(theta), w)
        return -ll, -g

    res = minimize(f, start.vector, gtol=1e-6, maxiter=max_iter)
    if not res.converged:
        raise NotConverged("BFGS did not reach gradient max-norm 1e-6",
                           gradient_max=float(np.max(np.abs(res.jac))), iterations=res.iterations)
    H = numeric_hessian(lambda th: f(th)[1], res.x)
    eig = np.linalg.eigvalsh(H)
    if eig.min() < 1e-10:
        raise NonIdentifiable("information matrix is singular; some direction is flat",
                              min_eigenvalue=float(eig.min()))
    cov = np.linalg.inv(H)
    cov = (cov + cov.T) / 2
    Xs = data.covariate_matrix(spec.covariate_columns) if spec.covariate_columns \
        else np.zeros((len(data), 0))
    return PanelFit(start.with_vector(res.x), cov, -float(res.fun), True, int(res.iterations), spec,
                    tuple(labels), Xs.mean(axis=0))


@dataclass
class PanelOccupancy:
    grid: np.ndarray
    probs: np.ndarray      # (G, K)
    labels: tuple

    def to_rows(self) -> list:
        return [{"time": float(t), **{lab: float(v) for lab, v in zip(self.labels, p)}}
                for t, p in zip(self.grid, self.probs)]


def occupancy_from_fit(fit: PanelFit, profile=None, grid=None, start_state: int = 0
                       ) -> PanelOccupancy:
    """Row ``start_state`` of P(0, t | x) over ``grid``; ``profile=None`` uses covariate means."""
    if not fit.converged:
        raise NotConverged("fit did not converge")
    x = fit.covariate_means if profile is None else np.asarray(profile, dtype=float)
    if isinstance(profile, dict):
        x = np.array([float(profile.get(c, 0.0)) for c in fit.spec.covariate_columns])
    grid = np.asarray(grid if grid is not None else np.linspace(0, 30, 301), dtype=float)
    probs = np.array([transition_probability(fit.params, x, 0.0, t)[start_state] for t in grid])
    return PanelOccupancy(grid, probs, fit.state_labels)
