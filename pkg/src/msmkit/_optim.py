"""Shared quasi-Newton driver for the likelihood fitters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    jac: np.ndarray
    iterations: int
    converged: bool


def numeric_hessian(grad, x, rel=1e-4):
    """Central differences of an analytic gradient, symmetrised."""
    x = np.asarray(x, dtype=float)
    H = np.empty((len(x), len(x)))
    for j in range(len(x)):
        h = rel * (1 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        H[:, j] = (grad(x + e) - grad(x - e)) / (2 * h)
    return (H + H.T) / 2


def minimize(fg, x0, gtol=1e-6, maxiter=500) -> OptResult:
    """BFGS on ``fg(x) -> (f, grad)``, then Newton polishing if the max-norm test fails.

    BFGS with a line search stalls short of very tight gradient tolerances
    on badly scaled problems; a few Newton steps with a finite-difference
    Hessian of the analytic gradient finish the job.
    """
    x0 = np.asarray(x0, dtype=float)
    if len(x0) == 0:
        f, g = fg(x0)
        return OptResult(x0, float(f), np.asarray(g), 0, True)
    res = optimize.minimize(fg, x0, jac=True, method="BFGS",
                            options={"gtol": gtol, "maxiter": maxiter, "xrtol": 1e-10})
    x, f, g, nit = res.x, float(res.fun), np.asarray(res.jac), int(res.nit)
    # Newton steps until the gradient is well below gtol; once gtol is met a step
    # is kept only if it shrinks the gradient, since f no longer resolves changes
    for _ in range(30):
        gmax = np.max(np.abs(g))
        if gmax < 1e-3 * gtol or not np.all(np.isfinite(g)):
            break
        H = numeric_hessian(lambda z: fg(z)[1], x)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if g @ step >= 0:
            if gmax < gtol:
                break
            step = -g / max(1.0, gmax)
        t = 1.0
        for _ in range(40):
            fn, gn = fg(x + t * step)
            if gmax < gtol:
                ok = np.all(np.isfinite(gn)) and np.max(np.abs(gn)) < gmax
            else:
                ok = np.isfinite(fn) and fn <= f + 1e-4 * t * (g @ step)
            if ok:
                break
            t /= 2
        else:
            break
        x, f, g = x + t * step, float(fn), np.asarray(gn)
        nit += 1
    return OptResult(x, f, g, nit, bool(np.max(np.abs(g)) < gtol))
