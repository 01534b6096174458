"""Ingestion recipes for the public datasets used in the worked examples.

The licensed data are not shipped. Each recipe accepts either a path to the
raw delimited export or a DataFrame; when the optional ``rdatasets`` package
is installed, :func:`fetch_raw` returns the R ``survival`` package copies.

colon (R ``survival::colon``)
    Two rows per subject (etype 1 recurrence, 2 death), times in days.
    Five subjects have recurrence and death on the same day; recurrence is
    moved one day earlier to avoid zero-length intervals. Times are divided
    by 365.25. Covariates: ``trt`` (Lev+5FU vs the other two arms),
    ``extent34`` (extent 3 or 4), ``node4`` (more than 4 positive nodes).

psor (R ``msm::psor``)
    Columns ptnum, months (years since onset despite the name), state 1..4,
    hieffusn, ollwsdrt. Covariates are taken at the first visit; ollwsdrt is
    flipped so that ``esr`` = 1 means an elevated sedimentation rate.

rotterdam (R ``survival::rotterdam``)
    Node-positive subjects only. Relapse and death times in days converted
    to years; when relapse and death fall on the same day, death is moved
    half a day later.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .core import (
    EpisodeDataset,
    PanelDataset,
    PanelSubject,
    StateSpace,
    read_delimited,
)
from .errors import MissingColumn

COLON_STATES = StateSpace(
    ("(s0)", "recur", "death pre-recurrence", "death post-recurrence"),
    frozenset({2, 3}),
    frozenset({(0, 1), (0, 2), (1, 3)}),
)

PSOR_STATES = StateSpace(
    ("0 damaged", "1-4 damaged", "5-9 damaged", "10+ damaged"),
    frozenset({3}),
    frozenset({(0, 1), (1, 2), (2, 3)}),
)


def fetch_raw(name: str) -> pd.DataFrame:
    """Raw table from the optional ``rdatasets`` package (survival::colon, survival::rotterdam)."""
    import rdatasets

    package = {"colon": "survival", "rotterdam": "survival", "psor": "msm"}[name]
    return rdatasets.data(package, name)


def _frame(src) -> pd.DataFrame:
    if isinstance(src, pd.DataFrame):
        return src
    return read_delimited(src)


def _need(df, cols):
    for c in cols:
        if c not in df.columns:
            raise MissingColumn(f"column {c!r} not found", column=c)


def colon_episodes(src, shift_tied_recurrence=True, years=True) -> EpisodeDataset:
    """Counting-process illness-death data from the raw colon table."""
    df = _frame(src)
    _need(df, ["id", "rx", "extent", "node4", "time", "status", "etype"])
    rec = df[df["etype"] == 1].set_index("id")
    dth = df[df["etype"] == 2].set_index("id")
    scale = 365.25 if years else 1.0
    rows = []
    for sid in dth.index:
        d, r = dth.loc[sid], rec.loc[sid]
        cov = (float(d["rx"] == "Lev+5FU"), float(d["extent"] >= 3), float(d["node4"]))
        rtime, dtime = float(r["time"]), float(d["time"])
        if shift_tied_recurrence and r["status"] == 1 and d["status"] == 1 and rtime == dtime:
            rtime -= 1.0
        if r["status"] == 1:
            rows.append((sid, 0.0, rtime, 0, 1, cov))
            if dtime > rtime:
                rows.append((sid, rtime, dtime, 1, 3 if d["status"] == 1 else -1, cov))
        else:
            rows.append((sid, 0.0, dtime, 0, 2 if d["status"] == 1 else -1, cov))
    ids, t0, t1, fr, to, cov = zip(*rows)
    return EpisodeDataset(COLON_STATES, ids, np.array(t0) / scale, np.array(t1) / scale,
                          fr, to, np.array(cov), ("trt", "extent34", "node4"))


def psor_panel(src) -> PanelDataset:
    """Panel data from the raw psor table with first-visit covariates (effusion, esr)."""
    df = _frame(src)
    _need(df, ["ptnum", "months", "state", "hieffusn", "ollwsdrt"])
    subjects = []
    for sid, g in df.groupby("ptnum", sort=True):
        g = g.sort_values("months", kind="stable")
        first = g.iloc[0]
        cov = np.array([float(first["hieffusn"]), 1.0 - float(first["ollwsdrt"] != 0)])
        subjects.append(PanelSubject(sid, cov, g["months"].to_numpy(float),
                                     g["state"].to_numpy(int) - 1))
    return PanelDataset(PSOR_STATES, subjects, ("effusion", "esr"))


ROTTERDAM_COVARIATES = ("age10", "meno", "size20_50", "size50", "log_nodes", "log_er",
                        "log_pgr", "hormon", "chemo", "grade3")


def rotterdam_illness_death(src):
    """Illness-death records (w1, w2, delta1..3) for node-positive Rotterdam subjects."""
    from .frailty import IllnessDeathData

    df = _frame(src)
    _need(df, ["pid", "age", "meno", "size", "grade", "nodes", "pgr", "er", "hormon", "chemo",
               "rtime", "recur", "dtime", "death"])
    df = df[df["nodes"] > 0].reset_index(drop=True)
    rtime = df["rtime"].to_numpy(float) / 365.25
    dtime = df["dtime"].to_numpy(float) / 365.25
    recur = df["recur"].to_numpy(int)
    death = df["death"].to_numpy(int)
    tied = (recur == 1) & (df["rtime"].to_numpy() == df["dtime"].to_numpy())
    dtime = np.where(tied, dtime + 0.5 / 365.25, dtime)
    size = df["size"].astype(str)
    X = np.column_stack([
        df["age"].to_numpy(float) / 10,
        df["meno"].to_numpy(float),
        (size == "20-50").to_numpy(float),
        (size == ">50").to_numpy(float),
        np.log(df["nodes"].to_numpy(float)),
        np.log1p(df["er"].to_numpy(float)),
        np.log1p(df["pgr"].to_numpy(float)),
        df["hormon"].to_numpy(float),
        df["chemo"].to_numpy(float),
        (df["grade"] == 3).to_numpy(float),
    ])
    d1 = recur
    w1 = np.where(d1 == 1, rtime, dtime)
    d2 = np.where(d1 == 1, 0, death)
    w2 = np.where(d1 == 1, dtime, 0.0)
    d3 = np.where(d1 == 1, death, 0)
    return IllnessDeathData(df["pid"].to_numpy(), w1, w2, d1, d2, d3, X, ROTTERDAM_COVARIATES)
