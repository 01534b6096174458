"""Event-history simulator with piecewise-constant intensities.

Sojourns are drawn by exact inversion of the piecewise-linear all-cause
cumulative hazard; the destination is chosen with probability proportional
to the cause-specific intensities at the jump time. Every subject has its
own Philox substream keyed by ``(seed, subject index)``, so results do not
depend on generation order.

Scenario JSON layout::

    {"state_space": {"labels": [...], "allowed": [[0, 1], ...]},
     "intensities": {"0:1": 0.5, "1:2": {"rates": [0.2, 0.8], "cutpoints": [5]}},
     "beta": {"0:1": {"x": 0.7}},
     "clock": "total",                      # or "reset", or {"1": "reset"}
     "frailty_variance": 0.0,
     "covariates": [{"name": "x", "dist": "bernoulli", "p": 0.5}],
     "censoring": {"admin": 10.0, "rate": 0.1},
     "visits": {"every": 1.0, "until": 10.0},
     "start_state": 0, "n": 500, "seed": 1}
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EpisodeDataset, PanelDataset, PanelSubject, StateSpace, load_state_space
from .errors import InvalidSpec


@dataclass(frozen=True)
class PiecewiseRate:
    rates: tuple
    cutpoints: tuple = ()

    def __post_init__(self):
        r = tuple(float(x) for x in np.atleast_1d(self.rates))
        c = tuple(float(x) for x in self.cutpoints)
        if len(r) != len(c) + 1:
            raise InvalidSpec("need one rate per band (len(cutpoints) + 1)")
        if any(not np.isfinite(x) or x < 0 for x in r):
            raise InvalidSpec("rates must be finite and non-negative")
        if any(x <= 0 for x in c) or any(b <= a for a, b in zip(c, c[1:])):
            raise InvalidSpec("cutpoints must be positive and increasing")
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "cutpoints", c)

    def at(self, u):
        return np.asarray(self.rates)[np.searchsorted(self.cutpoints, u, side="right")]

    def cumulative(self, u):
        """Λ(u) = ∫_0^u λ."""
        u = np.asarray(u, dtype=float)
        edges = np.concatenate([[0.0], self.cutpoints, [np.inf]])
        lo = edges[:-1]
        hi = edges[1:]
        over = np.clip(np.minimum(u[..., None], hi) - lo, 0, None)
        return over @ np.asarray(self.rates)


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    dist: str = "bernoulli"
    p: float = 0.5
    low: float = 0.0
    high: float = 1.0
    mean: float = 0.0
    sd: float = 1.0
    values: tuple = ()

    def draw(self, rng, i):
        if self.dist == "bernoulli":
            return float(rng.random() < self.p)
        if self.dist == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.dist == "normal":
            return float(rng.normal(self.mean, self.sd))
        if self.dist == "fixed":
            return float(self.values[i % len(self.values)])
        raise InvalidSpec(f"unknown covariate distribution {self.dist!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    state_space: StateSpace
    intensities: dict                      # (k, l) -> PiecewiseRate
    beta: dict = field(default_factory=dict)   # (k, l) -> {name: coef}
    clock: dict = field(default_factory=dict)  # state -> "total" | "reset"
    frailty_variance: float = 0.0
    covariates: tuple = ()
    admin_censoring: float = np.inf
    censoring_rate: float = 0.0
    visits: dict | None = None
    start_state: int = 0
    n: int = 100
    seed: int = 0

    def __post_init__(self):
        ss = self.state_space
        for tr in self.intensities:
            if tuple(tr) not in ss.allowed:
                raise InvalidSpec(f"intensity given for disallowed transition {tr}")
        names = {c.name for c in self.covariates}
        for tr, b in self.beta.items():
            if tuple(tr) not in self.intensities:
                raise InvalidSpec(f"coefficients for transition {tr} without an intensity")
            unknown = set(b) - names
            if unknown:
                raise InvalidSpec(f"coefficients refer to unknown covariates {sorted(unknown)}")
        if not self.admin_censoring > 0:
            raise InvalidSpec("administrative censoring time must be positive")
        if self.censoring_rate < 0 or self.frailty_variance < 0:
            raise InvalidSpec("rates and variances must be non-negative")
        if self.n < 1:
            raise InvalidSpec("n must be at least 1")
        for k, c in self.clock.items():
            if c not in ("total", "reset"):
                raise InvalidSpec(f"clock for state {k} must be 'total' or 'reset'")
        if not 0 <= self.start_state < ss.size:
            raise InvalidSpec("start state out of range")

    @property
    def covariate_names(self) -> tuple:
        return tuple(c.name for c in self.covariates)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        try:
            ss = load_state_space(d["state_space"])
        except KeyError:
            raise InvalidSpec("scenario needs a state_space") from None

        def tr(key):
            parts = str(key).replace("->", ":").split(":")
            if len(parts) != 2:
                raise InvalidSpec(f"bad transition key {key!r}")
            return ss.index(parts[0].strip()), ss.index(parts[1].strip())

        ints = {}
        for key, v in d.get("intensities", {}).items():
            if isinstance(v, dict):
                ints[tr(key)] = PiecewiseRate(v["rates"], v.get("cutpoints", ()))
            else:
                ints[tr(key)] = PiecewiseRate((v,))
        beta = {tr(k): {n: float(c) for n, c in v.items()} for k, v in d.get("beta", {}).items()}
        clock = d.get("clock", "total")
        if isinstance(clock, str):
            clock = {k: clock for k in range(ss.size)}
        else:
            clock = {ss.index(k): v for k, v in clock.items()}
        covs = tuple(CovariateSpec(**c) for c in d.get("covariates", ()))
        cens = d.get("censoring", {})
        admin = cens.get("admin")
        return cls(ss, ints, beta, clock, float(d.get("frailty_variance", 0.0)), covs,
                   np.inf if admin is None else float(admin), float(cens.get("rate", 0.0)),
                   d.get("visits"), ss.index(d.get("start_state", 0)), int(d.get("n", 100)),
                   int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, src) -> "ScenarioSpec":
        text = str(src)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        try:
            return cls.from_dict(json.loads(text))
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidSpec):
                raise
            raise InvalidSpec(f"invalid scenario: {e}") from e

    def with_(self, **kw) -> "ScenarioSpec":
        from dataclasses import replace
        return replace(self, **kw)


def subject_rng(seed: int, i: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(i),
                                                                        int(stream)])))


def _sojourn(rates_out, scales, c0, rng):
    """Draw (clock value at jump, destination index) by exact inversion from clock ``c0``."""
    cuts = sorted({c for r in rates_out for c in r.cutpoints if c > c0})
    edges = [c0] + cuts + [np.inf]
    target = rng.standard_exponential()
    acc = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = a if np.isinf(b) else (a + b) / 2
        lam = np.array([s * r.at(mid) for r, s in zip(rates_out, scales)])
        tot = lam.sum()
        if tot > 0 and acc + tot * (b - a) >= target:
            u = a + (target - acc) / tot
            dest = int(rng.choice(len(lam), p=lam / tot))
            return u, dest
        if tot > 0:
            acc += tot * (b - a)
    return np.inf, -1


def _path(spec: ScenarioSpec, i: int):
    """One subject: covariates, then (tstart, tstop, from, to) records."""
    rng = subject_rng(spec.seed, i)
    x = {c.name: c.draw(rng, i) for c in spec.covariates}
    th = spec.frailty_variance
    omega = rng.gamma(1 / th, th) if th > 0 else 1.0
    C = spec.admin_censoring
    if spec.censoring_rate > 0:
        C = min(C, rng.exponential(1 / spec.censoring_rate))
    ss = spec.state_space
    k, t, rows = spec.start_state, 0.0, []
    while k not in ss.absorbing:
        outs = [(l, spec.intensities[(k, l)]) for (a, l) in ss.transitions
                if a == k and (k, l) in spec.intensities]
        if not outs:
            rows.append((t, C, k, -1))
            break
        scales = [omega * np.exp(sum(b * x[n] for n, b in spec.beta.get((k, l), {}).items()))
                  for l, _ in outs]
        reset = spec.clock.get(k, "total") == "reset"
        c0 = 0.0 if reset else t
        u, j = _sojourn([r for _, r in outs], scales, c0, rng)
        t_jump = t + (u - c0)
        if t_jump > C:
            rows.append((t, C, k, -1))
            break
        rows.append((t, t_jump, k, outs[j][0]))
        k, t = outs[j][0], t_jump
    return x, rows, C


def simulate_paths(spec: ScenarioSpec) -> EpisodeDataset:
    """Continuous-time paths in counting-process form; bit-identical for a fixed seed."""
    ss = spec.state_space
    names = spec.covariate_names
    if spec.start_state in ss.absorbing:
        warnings.warn("start state is absorbing; no subject can be followed", stacklevel=2)
        return EpisodeDataset(ss, [], [], [], [], [], np.zeros((0, len(names))), names)
    sid, t0, t1, fr, to, cov = [], [], [], [], [], []
    for i in range(spec.n):
        x, rows, _ = _path(spec, i)
        xv = [x[n] for n in names]
        for a, b, k, l in rows:
            sid.append(i + 1)
            t0.append(a)
            t1.append(b)
            fr.append(k)
            to.append(l)
            cov.append(xv)
    return EpisodeDataset(ss, sid, t0, t1, fr, to,
                          np.array(cov, dtype=float).reshape(len(sid), len(names)), names)


def _visit_times(visits: dict, rng) -> np.ndarray:
    if "times" in visits:
        return np.unique(np.asarray(visits["times"], dtype=float))
    until = float(visits.get("until", np.inf))
    if "every" in visits:
        g = float(visits["every"])
        if g <= 0 or not np.isfinite(until):
            raise InvalidSpec("fixed visit grid needs every > 0 and a finite 'until'")
        return np.arange(0.0, until + g * 1e-9, g)
    if "renewal" in visits:
        mean = float(visits["renewal"])
        if mean <= 0 or not np.isfinite(until):
            raise InvalidSpec("renewal visits need a positive mean gap and a finite 'until'")
        out, t = [0.0], 0.0
        while True:
            t += rng.exponential(mean)
            if t > until:
                return np.array(out)
            out.append(t)
    raise InvalidSpec("visit schedule needs 'times', 'every' or 'renewal'")


def simulate_panel(spec: ScenarioSpec) -> PanelDataset:
    """States recorded at visit times up to censoring; follow-up stops at the first absorbing visit."""
    if spec.visits is None:
        raise InvalidSpec("scenario has no visit schedule")
    ss = spec.state_space
    subjects = []
    for i in range(spec.n):
        x, rows, C = _path(spec, i)
        times = _visit_times(spec.visits, subject_rng(spec.seed, i, 1))
        times = times[times <= C]
        jump_t = np.array([r[1] for r in rows if r[3] >= 0])
        states = [spec.start_state] + [r[3] for r in rows if r[3] >= 0]
        z = np.array([states[np.searchsorted(jump_t, v, side="right")] for v in times], dtype=int)
        hit = np.flatnonzero(np.isin(z, list(ss.absorbing)))
        if len(hit):
            times, z = times[: hit[0] + 1], z[: hit[0] + 1]
        subjects.append(PanelSubject(i + 1, np.array([x[n] for n in spec.covariate_names]),
                                     times, z))
    return PanelDataset(ss, subjects, spec.covariate_names)
