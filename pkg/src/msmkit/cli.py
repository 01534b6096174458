"""Command-line front end.

Every subcommand writes one JSON result file into the output directory
(``--out``, default ``$MSMKIT_OUT`` or the working directory) and, for
curve estimators, delimited plot-data files with columns
``time, estimate, lower, upper``.

Exit status: 0 success, 2 data error, 3 non-convergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .core import (
    PanelDataset,
    load_episodes,
    load_panel,
    load_state_space,
    validate,
    validate_panel,
    write_episodes,
)
from .errors import ConvergenceError, DataError, MsmError

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MSMKIT_OUT") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(args, name, payload) -> Path:
    path = _out_dir(args) / name
    path.write_text(json.dumps(_clean(payload), indent=2) + "\n")
    return path


def _write_curve(args, name, rows) -> Path:
    path = _out_dir(args) / name
    pd.DataFrame(rows, columns=list(rows[0]) if rows else ["time", "estimate", "lower", "upper"]
                 ).to_csv(path, index=False, float_format="%.17g")
    return path


def _list(s):
    if s is None:
        return []
    return [p.strip() for p in str(s).split(",") if p.strip()]


def _transition(s):
    parts = str(s).replace("->", ":").split(":")
    if len(parts) != 2:
        raise UsageError(f"transition must look like 'k:l', got {s!r}")
    return parts[0].strip(), parts[1].strip()


def _safe(v):
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in str(v))


def _episodes(args):
    if getattr(args, "recipe", None) == "colon":
        from .datasets import colon_episodes
        return colon_episodes(args.input)
    if not args.input:
        raise UsageError("--input is required")
    return load_episodes(args.input, args.schema, load_state_space(args.state_space),
                         _list(args.covariates) or None)


def _grid(args, dataset):
    if getattr(args, "grid", None):
        return np.array([float(v) for v in _list(args.grid)])
    t = np.unique(dataset.tstop[dataset.to_state >= 0])
    return np.r_[0.0, t]


def _bands_rows(bands):
    return [{"time": t, "estimate": e, "lower": a, "upper": b}
            for t, e, a, b in zip(bands.grid, bands.estimate, bands.lower, bands.upper)]


# ---------------------------------------------------------------- commands

def cmd_validate(args):
    if args.panel:
        data = load_panel(args.input, args.schema, load_state_space(args.state_space),
                          _list(args.covariates))
        findings = validate_panel(data)
        _write_json(args, "validate.json", {"subjects": len(data),
                                            "observations": data.n_observations,
                                            "findings": findings})
        return
    ds = _episodes(args)
    _write_json(args, "validate.json", validate(ds).to_dict(ds.state_space))


def _groups(ds, by):
    if not by:
        return [("all", ds)]
    col = ds.covariate(by)
    return [(f"{by}={v:g}", ds.subset(col == v)) for v in np.unique(col)]


def cmd_na(args):
    from .nonparam import nelson_aalen
    ds = _episodes(args)
    tr = ds.state_space.check_transition(_transition(args.transition))
    out = {"transition": list(tr), "level": args.level, "groups": {}}
    for name, g in _groups(ds, args.by):
        f = nelson_aalen(g, tr)
        rows = f.to_rows(args.level)
        out["groups"][name] = rows
        _write_curve(args, f"na_{tr[0]}-{tr[1]}_{_safe(name)}.csv", rows)
    _write_json(args, "na.json", out)


def cmd_aj(args):
    from .nonparam import aalen_johansen, bootstrap_bands, occupancy, occupancy_estimator
    ds = _episodes(args)
    grid = _grid(args, ds)
    path = aalen_johansen(ds, args.s, grid[grid >= args.s])
    occ = occupancy(ds, grid)
    out = {"s": args.s, "grid": path.grid, "matrices": path.matrices,
           "occupancy": {lab: occ.probs[:, k] for k, lab in enumerate(ds.state_space.labels)},
           "diagnostics": path.diagnostics}
    for k, lab in enumerate(ds.state_space.labels):
        if args.bootstrap:
            b = bootstrap_bands(ds, occupancy_estimator(k), grid, args.bootstrap, args.seed,
                                args.level)
            rows = _bands_rows(b)
        else:
            rows = [{"time": t, "estimate": v, "lower": None, "upper": None}
                    for t, v in zip(grid, occ.probs[:, k])]
        _write_curve(args, f"occupancy_{_safe(lab)}.csv", rows)
    _write_json(args, "aj.json", out)


def cmd_cif(args):
    from .nonparam import bootstrap_bands, cif_estimator, cumulative_incidence
    ds = _episodes(args)
    if not args.target:
        raise UsageError("--target is required")
    follow = _list(args.following)
    grid = _grid(args, ds)
    curve = cumulative_incidence(ds, args.target, follow, grid)
    est = curve(grid)
    if args.bootstrap:
        b = bootstrap_bands(ds, cif_estimator(args.target, follow), grid, args.bootstrap,
                            args.seed, args.level)
        rows = _bands_rows(b)
    else:
        rows = [{"time": t, "estimate": v, "lower": None, "upper": None}
                for t, v in zip(grid, est)]
    _write_curve(args, f"cif_{_safe(args.target)}.csv", rows)
    _write_json(args, "cif.json", {"target": args.target, "following": follow, "curve": rows})


def cmd_rmst(args):
    from .nonparam import occupancy, replicate_weights, restricted_mean_sojourn
    from .pseudo import _batched_functional
    ds = _episodes(args)
    if args.tau is None:
        raise UsageError("--tau is required")
    k = ds.state_space.index(args.state)
    occ = occupancy(ds, np.array([0.0, args.tau]))
    value = restricted_mean_sojourn(occ.curve(k), args.tau)
    out = {"state": ds.state_space.labels[k], "tau": args.tau, "estimate": value}
    if args.bootstrap:
        W = replicate_weights(ds.n_subjects, args.bootstrap, args.seed)
        reps = _batched_functional(ds, args.tau, W, rmst=True)[:, k]
        a = (1 - args.level) / 2
        out.update(lower=float(np.quantile(reps, a)), upper=float(np.quantile(reps, 1 - a)),
                   replicates=args.bootstrap, level=args.level)
    _write_json(args, "rmst.json", out)


def _cox_payload(fits, ds, level):
    out = []
    labels = ds.state_space.labels
    for (k, l), f in fits.items():
        out.append({"transition": f"{labels[k]} -> {labels[l]}", "from": k, "to": l,
                    "ties": f.spec.ties, "timescale": f.spec.timescale, "loglik": f.loglik,
                    "loglik_null": f.loglik_null, "iterations": f.iterations,
                    "events": f.n_events, "coefficients": f.table(level),
                    "robust_se": None if f.robust_covariance is None
                    else np.sqrt(np.diag(f.robust_covariance))})
    return out


def cmd_cox(args):
    from .coxreg import CoxSpec, fit_cox, forest_rows
    ds = _episodes(args)
    cov = _list(args.covariates) or list(ds.covariate_names)
    trs = [ds.state_space.check_transition(_transition(args.transition))] if args.transition \
        else ds.state_space.transitions
    fits = {}
    for tr in trs:
        sel = (ds.from_state == tr[0]) & (ds.to_state == tr[1])
        if args.transition or sel.any():
            fits[tr] = fit_cox(ds, CoxSpec(tr, cov, args.ties, args.timescale),
                               robust=args.robust)
    for (k, l), f in fits.items():
        _write_curve(args, f"baseline_{k}-{l}.csv", f.baseline.to_rows(args.level))
    _write_curve(args, "forest.csv", forest_rows(fits, ds.state_space.labels, args.level))
    _write_json(args, "cox.json", {"fits": _cox_payload(fits, ds, args.level)})


def _panel_data(args):
    if args.recipe == "psor":
        from .datasets import psor_panel
        return psor_panel(args.input)
    if not args.input:
        raise UsageError("--input is required")
    return load_panel(args.input, args.schema, load_state_space(args.state_space),
                      _list(args.covariates))


def cmd_panel(args):
    from .panel import PanelSpec, fit_panel, occupancy_from_fit
    data = _panel_data(args)
    cov = _list(args.covariates) if args.covariates is not None else list(data.covariate_names)
    fit = fit_panel(data, PanelSpec(tuple(float(c) for c in _list(args.cutpoints)), cov))
    grid = np.linspace(0, args.horizon, 301)
    occ = occupancy_from_fit(fit, None, grid)
    _write_curve(args, "panel_occupancy.csv", occ.to_rows())
    _write_json(args, "panel.json", fit.to_dict(args.level))


def cmd_pseudo(args):
    from .pseudo import baseline_covariates, fit_gee, pseudo_occupancy, pseudo_rmst
    ds = _episodes(args)
    if (args.t0 is None) == (args.tau is None):
        raise UsageError("give exactly one of --t0 (occupancy) or --tau (restricted mean)")
    pv = pseudo_occupancy(ds, args.state, args.t0) if args.t0 is not None \
        else pseudo_rmst(ds, args.state, args.tau)
    cov = _list(args.covariates) or list(ds.covariate_names)
    link = args.link or ("cloglog" if args.t0 is not None else "identity")
    fit = fit_gee(pv, baseline_covariates(ds, cov), link, names=cov)
    pd.DataFrame(pv.to_rows()).to_csv(_out_dir(args) / "pseudo_values.csv", index=False,
                                      float_format="%.17g")
    _write_json(args, "pseudo.json", {"kind": pv.kind, "t0": pv.t0,
                                      "state": ds.state_space.labels[pv.state],
                                      "base_estimate": pv.base_estimate, **fit.to_dict()})


def cmd_direct_binomial(args):
    from .pseudo import fit_direct_binomial
    ds = _episodes(args)
    if args.t0 is None:
        raise UsageError("--t0 is required")
    cov = _list(args.covariates) or list(ds.covariate_names)
    fit = fit_direct_binomial(ds, args.state, args.t0, cov, args.link or "logit")
    _write_json(args, "direct_binomial.json", {"t0": args.t0, "state": args.state,
                                               **fit.to_dict()})


def cmd_frailty(args):
    from .frailty import FrailtySpec, fit_frailty, load_illness_death
    if args.recipe == "rotterdam":
        from .datasets import rotterdam_illness_death
        data = rotterdam_illness_death(args.input)
    else:
        if not args.input:
            raise UsageError("--input is required")
        data = load_illness_death(args.input, _list(args.covariates) or None)
    cov = _list(args.covariates) if args.covariates is not None else list(data.covariate_names)
    spec = FrailtySpec(tuple(float(c) for c in _list(args.cutpoints)), tuple(cov))
    fit = fit_frailty(data, spec)
    _write_json(args, "frailty.json", {"counts": data.counts(), **fit.to_dict()})


def cmd_simulate(args):
    from .sim import ScenarioSpec, simulate_panel, simulate_paths
    if not args.spec:
        raise UsageError("--spec is required")
    spec = ScenarioSpec.from_json(args.spec)
    if args.seed is not None:
        spec = spec.with_(seed=args.seed)
    if args.n is not None:
        spec = spec.with_(n=args.n)
    out = _out_dir(args)
    if args.panel:
        data = simulate_panel(spec)
        data.to_frame().to_csv(out / "simulated_panel.csv", index=False, float_format="%.17g")
        summary = {"subjects": len(data), "observations": data.n_observations}
    else:
        ds = simulate_paths(spec)
        write_episodes(ds, out / "simulated.csv")
        summary = validate(ds).to_dict(ds.state_space)
    _write_json(args, "simulate.json", {"seed": spec.seed, "n": spec.n, **summary})


TABLE1_COVARIATES = ("trt", "extent34", "node4")


def reproduce_table1(src) -> dict:
    """Cox fits for 0->1, 1->2' (trt, extent, nodes) and 0->2 on the colon recipe."""
    from .coxreg import CoxSpec, fit_cox
    from .datasets import colon_episodes
    ds = colon_episodes(src)
    rep = validate(ds)
    rows = []
    for tr in ((0, 1), (1, 3), (0, 2)):
        fit = fit_cox(ds, CoxSpec(tr, TABLE1_COVARIATES))
        for r in fit.table():
            rows.append({"transition": f"{ds.state_space.labels[tr[0]]} -> "
                                       f"{ds.state_space.labels[tr[1]]}",
                         "from": tr[0], "to": tr[1], **r})
    return {"descriptives": rep.to_dict(ds.state_space), "coefficients": rows}


def cmd_reproduce_table1(args):
    if not args.input:
        raise UsageError("--input (raw colon export) is required")
    res = reproduce_table1(args.input)
    _write_curve(args, "forest.csv", [
        {"transition": r["transition"], "covariate": r["covariate"], "hr": r["hr"],
         "lower": r["lower"], "upper": r["upper"]} for r in res["coefficients"]])
    _write_json(args, "table1.json", res)


def reproduce_table2(src, horizon=30.0) -> dict:
    """Piecewise-constant Markov fits to the psoriatic panel (cut points 5, 10, 20)."""
    from .datasets import psor_panel
    from .panel import PanelSpec, fit_panel, occupancy_from_fit
    data = psor_panel(src)
    fit = fit_panel(data, PanelSpec((5.0, 10.0, 20.0), ("effusion", "esr")))
    plain = fit_panel(PanelDataset(data.state_space, data.subjects, data.covariate_names),
                      PanelSpec((5.0, 10.0, 20.0), ()))
    grid = np.linspace(0.0, horizon, 301)
    occ = occupancy_from_fit(plain, np.zeros(0), grid)
    return {"table2": fit.to_dict(), "no_covariate_fit": plain.to_dict(),
            "occupancy": occ.to_rows(),
            "p3_at_20": float(occ.probs[np.argmin(np.abs(grid - 20.0)), 3])}


def cmd_reproduce_table2(args):
    if not args.input:
        raise UsageError("--input (raw psor export) is required")
    res = reproduce_table2(args.input)
    _write_curve(args, "occupancy.csv", res.pop("occupancy"))
    _write_json(args, "table2.json", res)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msmkit", description="Multistate event-history estimation.",
                epilog="Exit status: 0 success, 2 data error, 3 non-convergence, 64 usage "
                       "error. Output directory defaults to $MSMKIT_OUT, else '.'.")
    p.add_argument("--version", action="version", version=f"msmkit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--out", help="output directory (default $MSMKIT_OUT or .)")
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("--level", type=float, default=0.95, help="confidence level")
        if data:
            sp.add_argument("--input", help="delimited input file")
            sp.add_argument("--schema", help="column map, e.g. 'id=pid,tstart=t0,tstop=t1,state=to'")
            sp.add_argument("--state-space", dest="state_space",
                            help="state-space JSON (file or inline)")
            sp.add_argument("--covariates", help="comma-separated covariate columns")
            sp.add_argument("--recipe", choices=["colon", "psor", "rotterdam"],
                            help="treat --input as a raw public-dataset export")

    cmds = {}

    def add(name, fn, help_, data=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        common(sp, data)
        sp.set_defaults(func=fn)
        cmds[name] = sp
        return sp

    sp = add("validate", cmd_validate, "tally transitions and report data problems")
    sp.add_argument("--panel", action="store_true", help="input is panel data")
    sp = add("na", cmd_na, "Nelson-Aalen cumulative intensity")
    sp.add_argument("--transition", required=True, help="k:l")
    sp.add_argument("--by", help="covariate to stratify curves by")
    sp = add("aj", cmd_aj, "Aalen-Johansen transition matrices and occupancy curves")
    sp.add_argument("--s", type=float, default=0.0, help="start time of P(s, t)")
    sp.add_argument("--grid", help="comma-separated evaluation times")
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B")
    sp = add("cif", cmd_cif, "cumulative incidence of a state")
    sp.add_argument("--target", help="target state")
    sp.add_argument("--following", help="comma-separated states entered after the target")
    sp.add_argument("--grid", help="comma-separated evaluation times")
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B")
    sp = add("rmst", cmd_rmst, "restricted mean sojourn in a state")
    sp.add_argument("--state", default="0")
    sp.add_argument("--tau", type=float)
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B")
    sp = add("cox", cmd_cox, "per-transition Cox regression")
    sp.add_argument("--transition", help="k:l (default: every observed transition)")
    sp.add_argument("--ties", choices=["efron", "breslow"], default="efron")
    sp.add_argument("--timescale", choices=["total", "reset"], default="total")
    sp.add_argument("--robust", action="store_true", help="also report sandwich SEs")
    sp = add("panel", cmd_panel, "piecewise-constant Markov model for panel data")
    sp.add_argument("--cutpoints", default="", help="comma-separated band boundaries")
    sp.add_argument("--horizon", type=float, default=30.0, help="occupancy curve horizon")
    sp = add("pseudo", cmd_pseudo, "pseudo-value regression for occupancy or restricted mean")
    sp.add_argument("--state", default="0")
    sp.add_argument("--t0", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--link", choices=["cloglog", "logit", "identity"])
    sp = add("direct-binomial", cmd_direct_binomial, "IPCW direct binomial regression")
    sp.add_argument("--state", default="0")
    sp.add_argument("--t0", type=float)
    sp.add_argument("--link", choices=["cloglog", "logit", "identity"])
    sp = add("frailty", cmd_frailty, "gamma-frailty illness-death model")
    sp.add_argument("--cutpoints", default="", help="comma-separated band boundaries")
    sp = add("simulate", cmd_simulate, "simulate paths or panel data from a scenario", data=False)
    sp.add_argument("--spec", help="scenario JSON file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--panel", action="store_true", help="emit visit-time observations")
    add("reproduce-table1", cmd_reproduce_table1, "Cox table for the colon cancer trial")
    add("reproduce-table2", cmd_reproduce_table2, "panel table for the psoriatic cohort")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        if getattr(args, "seed", None) is None and args.command != "simulate":
            args.seed = 0
        args.func(args)
    except UsageError as e:
        print(json.dumps({"error": "usage", "message": str(e)}), file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as e:
        print(json.dumps(_clean(e.as_dict())), file=sys.stderr)
        return EXIT_CONVERGENCE
    except DataError as e:
        print(json.dumps(_clean(e.as_dict())), file=sys.stderr)
        return EXIT_DATA
    except MsmError as e:
        print(json.dumps(_clean(e.as_dict())), file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(json.dumps({"error": "file_not_found", "message": str(e)}), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
