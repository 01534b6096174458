"""Data model for counting-process and panel-observation multistate data.

A record ``[tstart, tstop)`` of a subject in state ``k`` contributes to the
risk set of state ``k`` for ``tstart < t <= tstop``; a transition recorded
at ``tstop`` is therefore counted against a risk set that still contains the
subject. Censoring at ``t`` means the subject was observed through ``t``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DisallowedTransition,
    EmptyFile,
    InvalidRecord,
    InvalidStateSpace,
    MissingColumn,
    NonNumericTime,
    UnknownState,
    UnknownStateLabel,
)

DEFAULT_CENSOR_LABEL = "censor"
DEFAULT_INITIAL_LABEL = "(s0)"


@dataclass(frozen=True)
class StateSpace:
    """Labeled states, the absorbing subset and the allowed direct transitions."""

    labels: tuple
    absorbing: frozenset
    allowed: frozenset

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        object.__setattr__(self, "absorbing", frozenset(int(a) for a in self.absorbing))
        object.__setattr__(
            self, "allowed", frozenset((int(a), int(b)) for a, b in self.allowed)
        )
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise InvalidStateSpace("state labels must be unique", labels=list(self.labels))
        for a in self.absorbing:
            if not 0 <= a < n:
                raise InvalidStateSpace(f"absorbing index {a} out of range")
        for k, l in self.allowed:
            if not (0 <= k < n and 0 <= l < n):
                raise InvalidStateSpace(f"transition {k}->{l} out of range")
            if k == l:
                raise InvalidStateSpace(f"self transition {k}->{l} is not allowed")
            if k in self.absorbing:
                raise InvalidStateSpace(f"transition {k}->{l} leaves an absorbing state")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def transitions(self) -> list:
        return sorted(self.allowed)

    @property
    def transient(self) -> list:
        return [k for k in range(self.size) if k not in self.absorbing]

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if 0 <= int(label) < self.size:
                return int(label)
            raise UnknownState(f"state index {label} out of range", state=int(label))
        try:
            return self.labels.index(str(label))
        except ValueError:
            if str(label).lstrip("-").isdigit():
                return self.index(int(label))
            raise UnknownState(f"unknown state {label!r}", state=str(label)) from None

    def check_transition(self, transition) -> tuple:
        k, l = (self.index(x) for x in transition)
        if (k, l) not in self.allowed:
            raise DisallowedTransition(
                f"transition {self.labels[k]}->{self.labels[l]} is not allowed",
                transition=[k, l],
            )
        return k, l

    def reachable(self, k: int) -> set:
        """States reachable from ``k`` in one or more allowed steps."""
        seen, stack = set(), [k]
        while stack:
            a = stack.pop()
            for x, y in self.allowed:
                if x == a and y not in seen:
                    seen.add(y)
                    stack.append(y)
        return seen

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "absorbing": sorted(self.absorbing),
            "allowed": [list(p) for p in self.transitions],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateSpace":
        labels = list(d["labels"])

        def idx(x):
            if isinstance(x, int):
                return x
            return labels.index(str(x)) if str(x) in labels else int(x)

        absorbing = d.get("absorbing")
        allowed = [(idx(a), idx(b)) for a, b in d["allowed"]]
        if absorbing is None:
            sources = {a for a, _ in allowed}
            absorbing = [i for i in range(len(labels)) if i not in sources]
        return cls(tuple(labels), frozenset(idx(a) for a in absorbing), frozenset(allowed))

    @classmethod
    def two_state(cls, labels=("alive", "dead")) -> "StateSpace":
        return cls(tuple(labels), frozenset({1}), frozenset({(0, 1)}))

    @classmethod
    def competing_risks(cls, n_causes: int) -> "StateSpace":
        labels = ["(s0)"] + [f"cause{j}" for j in range(1, n_causes + 1)]
        return cls(
            tuple(labels),
            frozenset(range(1, n_causes + 1)),
            frozenset((0, j) for j in range(1, n_causes + 1)),
        )

    @classmethod
    def illness_death(
        cls, labels=("(s0)", "illness", "death", "death after illness")
    ) -> "StateSpace":
        """Four-state illness-death layout: 0->1, 0->2, 1->3 (3 plays the role of 2')."""
        return cls(tuple(labels), frozenset({2, 3}), frozenset({(0, 1), (0, 2), (1, 3)}))

    @classmethod
    def progressive(cls, n_states: int, labels=None) -> "StateSpace":
        labels = labels or [str(i) for i in range(n_states)]
        return cls(
            tuple(labels),
            frozenset({n_states - 1}),
            frozenset((i, i + 1) for i in range(n_states - 1)),
        )


def load_state_space(spec) -> StateSpace:
    """Accept a StateSpace, a mapping, a JSON string or a path to a JSON file."""
    if spec is None or isinstance(spec, StateSpace):
        return spec
    if isinstance(spec, Mapping):
        return StateSpace.from_dict(spec)
    text = str(spec)
    if text.lstrip().startswith("{"):
        return StateSpace.from_dict(json.loads(text))
    return StateSpace.from_dict(json.loads(Path(text).read_text()))


@dataclass(frozen=True)
class EpisodeRecord:
    subject_id: object
    tstart: float
    tstop: float
    from_state: int
    to_state: int | None  # None: censored at tstop
    covariates: tuple = ()

    @property
    def censored(self) -> bool:
        return self.to_state is None


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


class EpisodeDataset:
    """Counting-process intervals, stored column-wise and sorted by (subject, tstart).

    Structural problems (gaps, overlaps, zero-length intervals) are accepted at
    construction and surfaced by :func:`validate`; transitions outside the
    state space are rejected immediately.
    """

    def __init__(self, state_space, subject, tstart, tstop, from_state, to_state,
                 covariates=None, covariate_names=()):
        self.state_space = state_space
        subject = np.asarray(subject, dtype=object)
        tstart = np.asarray(tstart, dtype=float)
        tstop = np.asarray(tstop, dtype=float)
        from_state = np.asarray(from_state, dtype=int)
        to_state = np.asarray(to_state, dtype=int)
        n = len(subject)
        covariate_names = tuple(covariate_names)
        if covariates is None:
            covariates = np.zeros((n, len(covariate_names)))
        covariates = np.asarray(covariates, dtype=float).reshape(n, len(covariate_names))
        if not (len(tstart) == len(tstop) == len(from_state) == len(to_state) == n):
            raise InvalidRecord("column lengths differ")
        if n and not (np.all(np.isfinite(tstart)) and np.all(np.isfinite(tstop))):
            raise NonNumericTime("times must be finite")
        if n and np.any(tstart < 0):
            raise InvalidRecord("negative tstart")

        K = state_space.size
        for k, l in set(zip(from_state.tolist(), to_state.tolist())):
            if not 0 <= k < K:
                raise UnknownState(f"from-state index {k} out of range")
            if k in state_space.absorbing:
                raise InvalidRecord(f"record starts in absorbing state {state_space.labels[k]}")
            if l >= 0 and (k, l) not in state_space.allowed:
                raise DisallowedTransition(
                    f"observed transition {state_space.labels[k]}->{state_space.labels[l]}"
                    " is not allowed", transition=[k, l])

        # stable sort by subject order of first appearance, then tstart
        codes, uniq = _subject_codes(subject)
        order = np.lexsort((tstart, codes))
        self.subject = _readonly(subject[order])
        self.subject_code = _readonly(codes[order])
        self.subject_ids = tuple(uniq)
        self.tstart = _readonly(tstart[order])
        self.tstop = _readonly(tstop[order])
        self.from_state = _readonly(from_state[order])
        self.to_state = _readonly(to_state[order])
        self.covariates = _readonly(covariates[order])
        self.covariate_names = covariate_names

    @classmethod
    def from_records(cls, state_space, records: Iterable[EpisodeRecord], covariate_names=()):
        records = list(records)
        p = len(covariate_names)
        return cls(
            state_space,
            [r.subject_id for r in records],
            [r.tstart for r in records],
            [r.tstop for r in records],
            [r.from_state for r in records],
            [-1 if r.to_state is None else r.to_state for r in records],
            np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            covariate_names,
        )

    @property
    def records(self) -> list:
        return [
            EpisodeRecord(
                self.subject[i], float(self.tstart[i]), float(self.tstop[i]),
                int(self.from_state[i]),
                None if self.to_state[i] < 0 else int(self.to_state[i]),
                tuple(float(x) for x in self.covariates[i]),
            )
            for i in range(len(self))
        ]

    def __len__(self):
        return len(self.subject)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    def covariate(self, name) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise MissingColumn(f"unknown covariate {name!r}", column=name) from None

    def subset(self, mask) -> "EpisodeDataset":
        mask = np.asarray(mask, dtype=bool)
        return EpisodeDataset(
            self.state_space, self.subject[mask], self.tstart[mask], self.tstop[mask],
            self.from_state[mask], self.to_state[mask], self.covariates[mask],
            self.covariate_names,
        )

    def subset_subjects(self, ids) -> "EpisodeDataset":
        ids = set(ids)
        return self.subset(np.array([s in ids for s in self.subject], dtype=bool))

    def with_covariates(self, names, values) -> "EpisodeDataset":
        return EpisodeDataset(
            self.state_space, self.subject, self.tstart, self.tstop, self.from_state,
            self.to_state, values, names,
        )

    def entry_times(self) -> np.ndarray:
        """First tstart of each subject (index aligned with ``subject_ids``)."""
        first = np.full(self.n_subjects, np.inf)
        np.minimum.at(first, self.subject_code, self.tstart)
        return first

    def to_frame(self) -> pd.DataFrame:
        labels = self.state_space.labels
        df = pd.DataFrame({
            "id": self.subject,
            "tstart": self.tstart,
            "tstop": self.tstop,
            "from": [labels[k] for k in self.from_state],
            "state": [DEFAULT_CENSOR_LABEL if l < 0 else labels[l] for l in self.to_state],
        })
        for j, name in enumerate(self.covariate_names):
            df[name] = self.covariates[:, j]
        return df

    def __eq__(self, other):
        if not isinstance(other, EpisodeDataset):
            return NotImplemented
        return (
            self.state_space == other.state_space
            and self.covariate_names == other.covariate_names
            and [str(s) for s in self.subject] == [str(s) for s in other.subject]
            and np.array_equal(self.tstart, other.tstart)
            and np.array_equal(self.tstop, other.tstop)
            and np.array_equal(self.from_state, other.from_state)
            and np.array_equal(self.to_state, other.to_state)
            and np.array_equal(self.covariates, other.covariates)
        )

    def __repr__(self):
        return (f"EpisodeDataset({len(self)} records, {self.n_subjects} subjects, "
                f"states={list(self.state_space.labels)})")


def _subject_codes(subject):
    index, uniq = {}, []
    codes = np.empty(len(subject), dtype=int)
    for i, s in enumerate(subject):
        key = s.item() if hasattr(s, "item") else s
        if key not in index:
            index[key] = len(uniq)
            uniq.append(key)
        codes[i] = index[key]
    return codes, uniq


# ---------------------------------------------------------------- ingestion

DEFAULT_SCHEMA = {"id": "id", "tstart": "tstart", "tstop": "tstop", "state": "state"}


def parse_schema(schema) -> dict:
    """``schema`` may be a mapping or a string like ``id=id,tstart=time1``."""
    if schema is None:
        return dict(DEFAULT_SCHEMA)
    if isinstance(schema, Mapping):
        out = dict(DEFAULT_SCHEMA)
        out.update(schema)
        return out
    text = str(schema).strip()
    if text.startswith("{"):
        return parse_schema(json.loads(text))
    if Path(text).is_file():
        return parse_schema(json.loads(Path(text).read_text()))
    out = dict(DEFAULT_SCHEMA)
    for part in text.split(","):
        if part.strip():
            key, _, col = part.partition("=")
            out[key.strip()] = col.strip()
    return out


def read_delimited(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.stat().st_size == 0 or not path.read_text().strip():
        raise EmptyFile(f"{path} is empty", path=str(path))
    head = path.read_text().splitlines()[0]
    sep = "\t" if head.count("\t") > head.count(",") else ("," if "," in head else r"\s+")
    df = pd.read_csv(path, sep=sep, float_precision="round_trip")
    if len(df) == 0:
        raise EmptyFile(f"{path} has a header but no rows", path=str(path))
    return df


def load_episodes(path, schema=None, state_space=None, covariates=None,
                  censor_label=DEFAULT_CENSOR_LABEL, initial_label=None,
                  time_divisor=1.0) -> EpisodeDataset:
    """Read a comma- or tab-delimited counting-process file.

    Parameters
    ----------
    schema : mapping or str
        Column names for ``id``, ``tstart``, ``tstop`` and ``state`` (the label
        of the state entered at ``tstop``, or the censor label). An optional
        ``from`` column gives the state occupied during the interval; without
        it the first record of each subject starts in the initial state.
    state_space : StateSpace, optional
        Declared state space. When omitted it is inferred: the initial state
        plus every observed end label, absorbing states being those never left.
    covariates : list of str
        Columns carried as interval-constant covariates.
    time_divisor : float
        Times are divided by this (e.g. 365.25 for days to years).
    """
    df = read_delimited(path)
    return episodes_from_frame(df, schema, state_space, covariates, censor_label,
                               initial_label, time_divisor)


def episodes_from_frame(df, schema=None, state_space=None, covariates=None,
                        censor_label=DEFAULT_CENSOR_LABEL, initial_label=None,
                        time_divisor=1.0) -> EpisodeDataset:
    schema = parse_schema(schema)
    covariates = list(covariates or schema.get("covariates") or [])
    if isinstance(covariates, str):
        covariates = [c for c in covariates.split(",") if c]
    needed = [schema["id"], schema["tstart"], schema["tstop"], schema["state"]]
    if schema.get("from"):
        needed.append(schema["from"])
    for col in needed + covariates:
        if col not in df.columns:
            raise MissingColumn(f"column {col!r} not found", column=col,
                                available=list(map(str, df.columns)))
    if len(df) == 0:
        raise EmptyFile("no rows")
    times = {}
    for key in ("tstart", "tstop"):
        col = pd.to_numeric(df[schema[key]], errors="coerce")
        bad = col.isna() & df[schema[key]].notna() | df[schema[key]].isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise NonNumericTime(f"non-numeric {key} in row {row + 1}",
                                 column=schema[key], row=row + 1)
        times[key] = col.to_numpy(dtype=float) / float(time_divisor)
    cov = np.zeros((len(df), len(covariates)))
    for j, c in enumerate(covariates):
        vals = pd.to_numeric(df[c], errors="coerce")
        if vals.isna().any():
            raise NonNumericTime(f"covariate {c!r} has non-numeric or missing values", column=c)
        cov[:, j] = vals.to_numpy(dtype=float)

    end_labels = df[schema["state"]].astype(str).str.strip().to_list()
    from_labels = (df[schema["from"]].astype(str).str.strip().to_list()
                   if schema.get("from") else None)

    state_space = load_state_space(state_space)
    if state_space is None:
        state_space = _infer_state_space(df, schema, end_labels, from_labels, censor_label,
                                         initial_label)
    initial = state_space.index(initial_label) if initial_label is not None else 0

    def lookup(label, row):
        if label == censor_label:
            return -1
        if label in state_space.labels:
            return state_space.labels.index(label)
        if str(label).isdigit() and int(label) < state_space.size:
            return int(label)   # numeric state index
        raise UnknownStateLabel(f"unknown state label {label!r} in row {row + 1}",
                                label=label, row=row + 1)

    to_state = np.array([lookup(lab, i) for i, lab in enumerate(end_labels)], dtype=int)
    ids = df[schema["id"]].to_numpy(dtype=object)
    if from_labels is not None:
        from_state = np.array([lookup(lab, i) for i, lab in enumerate(from_labels)], dtype=int)
    else:
        from_state = _chain_from_states(ids, times["tstart"], to_state, initial)
    return EpisodeDataset(state_space, ids, times["tstart"], times["tstop"], from_state,
                          to_state, cov, covariates)


def _chain_from_states(ids, tstart, to_state, initial):
    codes, _ = _subject_codes(ids)
    order = np.lexsort((tstart, codes))
    from_state = np.empty(len(ids), dtype=int)
    prev_code, current = None, initial
    for i in order:
        if codes[i] != prev_code:
            prev_code, current = codes[i], initial
        from_state[i] = current
        if to_state[i] >= 0:
            current = to_state[i]
    return from_state


def _infer_state_space(df, schema, end_labels, from_labels, censor_label, initial_label):
    initial = initial_label or (from_labels[0] if from_labels else DEFAULT_INITIAL_LABEL)
    labels = [initial]
    for lab in (from_labels or []) + end_labels:
        if lab != censor_label and lab not in labels:
            labels.append(lab)
    ids = df[schema["id"]].to_numpy(dtype=object)
    tstart = pd.to_numeric(df[schema["tstart"]], errors="coerce").to_numpy(dtype=float)
    to_idx = np.array([-1 if lab == censor_label else labels.index(lab) for lab in end_labels])
    if from_labels is not None:
        fr = np.array([labels.index(lab) for lab in from_labels])
    else:
        fr = _chain_from_states(ids, tstart, to_idx, 0)
    allowed = {(int(a), int(b)) for a, b in zip(fr, to_idx) if b >= 0 and a != b}
    sources = set(fr.tolist()) | {a for a, _ in allowed}
    absorbing = {i for i in range(len(labels)) if i not in sources}
    return StateSpace(tuple(labels), frozenset(absorbing), frozenset(allowed))


def write_episodes(dataset: EpisodeDataset, path, sep=",") -> None:
    """Write in the delimited layout :func:`load_episodes` reads back exactly."""
    dataset.to_frame().to_csv(path, sep=sep, index=False, float_format="%.17g")


def reload_schema(dataset: EpisodeDataset) -> dict:
    """Schema matching :func:`write_episodes` output."""
    return {"id": "id", "tstart": "tstart", "tstop": "tstop", "state": "state",
            "from": "from", "covariates": list(dataset.covariate_names)}


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    transition_counts: dict
    censor_count: int
    subject_count: int
    record_count: int
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.warnings

    def count(self, k, l) -> int:
        return self.transition_counts.get((k, l), 0)

    def to_dict(self, state_space: StateSpace | None = None) -> dict:
        def name(k):
            return state_space.labels[k] if state_space else str(k)

        return {
            "ok": self.ok,
            "transition_counts": [
                {"from": name(k), "to": name(l), "from_index": k, "to_index": l, "count": c}
                for (k, l), c in sorted(self.transition_counts.items())
            ],
            "censor_count": self.censor_count,
            "subject_count": self.subject_count,
            "record_count": self.record_count,
            "warnings": self.warnings,
        }


def validate(dataset: EpisodeDataset) -> ValidationReport:
    """Tally transitions and report every structural problem; nothing is repaired."""
    counts = Counter()
    censor = 0
    for k, l in zip(dataset.from_state.tolist(), dataset.to_state.tolist()):
        if l < 0:
            censor += 1
        else:
            counts[(k, l)] += 1
    warnings = []
    absorbing = dataset.state_space.absorbing
    codes = dataset.subject_code
    n = len(dataset)
    seen = set()
    for i in range(n):
        sid = dataset.subject[i]
        sid = sid.item() if hasattr(sid, "item") else sid
        key = (codes[i], dataset.tstart[i], dataset.tstop[i], dataset.from_state[i],
               dataset.to_state[i])
        if key in seen:
            warnings.append({"kind": "duplicate", "subject": sid, "row": i})
        seen.add(key)
        if dataset.tstop[i] <= dataset.tstart[i]:
            warnings.append({"kind": "zero_length" if dataset.tstop[i] == dataset.tstart[i]
                             else "negative_length", "subject": sid, "row": i,
                             "time": float(dataset.tstart[i])})
        if i == 0 or codes[i - 1] != codes[i]:
            continue
        prev = i - 1
        expected = dataset.to_state[prev] if dataset.to_state[prev] >= 0 else dataset.from_state[prev]
        if dataset.to_state[prev] >= 0 and dataset.to_state[prev] in absorbing:
            warnings.append({"kind": "after_absorbing", "subject": sid, "row": i})
        if dataset.tstart[i] > dataset.tstop[prev]:
            warnings.append({"kind": "gap", "subject": sid, "row": i,
                             "from_time": float(dataset.tstop[prev]),
                             "to_time": float(dataset.tstart[i])})
        elif dataset.tstart[i] < dataset.tstop[prev]:
            warnings.append({"kind": "overlap", "subject": sid, "row": i,
                             "time": float(dataset.tstart[i])})
        if dataset.from_state[i] != expected:
            warnings.append({"kind": "teleport", "subject": sid, "row": i,
                             "expected": int(expected), "found": int(dataset.from_state[i])})
        if (dataset.to_state[prev] >= 0 and dataset.to_state[i] >= 0
                and dataset.tstop[i] == dataset.tstop[prev]):
            warnings.append({"kind": "simultaneous_transitions", "subject": sid, "row": i,
                             "time": float(dataset.tstop[i])})
    return ValidationReport(dict(counts), censor, dataset.n_subjects, n, warnings)


# ---------------------------------------------------------------- risk sets

@dataclass(frozen=True)
class RiskSet:
    count: int
    ids: frozenset


def _active(dataset, state, t):
    return (dataset.from_state == state) & (dataset.tstart < t) & (t <= dataset.tstop)


def risk_set(dataset: EpisodeDataset, state, t: float) -> RiskSet:
    """Subjects occupying ``state`` just before ``t`` and still under observation at ``t``."""
    k = dataset.state_space.index(state)
    if not t > 0:
        raise ValueError("risk sets are defined for t > 0")
    mask = _active(dataset, k, t)
    ids = frozenset(s.item() if hasattr(s, "item") else s for s in dataset.subject[mask])
    return RiskSet(len(ids), ids)


def at_risk_counts(dataset: EpisodeDataset, state: int, times, weights=None) -> np.ndarray:
    """Vectorised Ȳ_·k(t) over many ``times``; optional per-subject weights."""
    times = np.asarray(times, dtype=float)
    sel = dataset.from_state == state
    if weights is None:
        starts = np.sort(dataset.tstart[sel])
        stops = np.sort(dataset.tstop[sel])
        return (np.searchsorted(starts, times, side="left")
                - np.searchsorted(stops, times, side="left")).astype(float)
    w = np.asarray(weights, dtype=float)[dataset.subject_code[sel]]
    starts, stops = dataset.tstart[sel], dataset.tstop[sel]
    o1, o2 = np.argsort(starts, kind="stable"), np.argsort(stops, kind="stable")
    c1 = np.concatenate([[0.0], np.cumsum(w[o1])])
    c2 = np.concatenate([[0.0], np.cumsum(w[o2])])
    return (c1[np.searchsorted(starts[o1], times, side="left")]
            - c2[np.searchsorted(stops[o2], times, side="left")])


def event_times(dataset: EpisodeDataset, transition) -> list:
    """Distinct times with at least one observed ``k -> l`` transition, with multiplicities."""
    k, l = dataset.state_space.check_transition(transition)
    mask = (dataset.from_state == k) & (dataset.to_state == l)
    t, c = np.unique(dataset.tstop[mask], return_counts=True)
    return [(float(a), int(b)) for a, b in zip(t, c)]


# ---------------------------------------------------------------- panel data

@dataclass(frozen=True)
class PanelSubject:
    subject_id: object
    covariates: np.ndarray
    times: np.ndarray
    states: np.ndarray


@dataclass
class PanelDataset:
    state_space: StateSpace
    subjects: list
    covariate_names: tuple = ()

    def __post_init__(self):
        self.covariate_names = tuple(self.covariate_names)
        for s in self.subjects:
            if len(s.times) != len(s.states):
                raise InvalidRecord("times and states differ in length", subject=str(s.subject_id))
            if np.any(np.diff(s.times) <= 0):
                raise InvalidRecord("observation times must be strictly increasing",
                                    subject=str(s.subject_id))
            if len(s.states) and (s.states.min() < 0 or s.states.max() >= self.state_space.size):
                raise UnknownState("panel state out of range", subject=str(s.subject_id))

    def __len__(self):
        return len(self.subjects)

    @property
    def n_observations(self) -> int:
        return sum(len(s.times) for s in self.subjects)

    def pairs(self):
        """Arrays (subject index, t0, t1, state0, state1) over consecutive observations."""
        rows = []
        for i, s in enumerate(self.subjects):
            for r in range(1, len(s.times)):
                rows.append((i, s.times[r - 1], s.times[r], s.states[r - 1], s.states[r]))
        if not rows:
            return (np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros(0, int))
        a = list(zip(*rows))
        return (np.array(a[0], int), np.array(a[1], float), np.array(a[2], float),
                np.array(a[3], int), np.array(a[4], int))

    def covariate_matrix(self, names=None) -> np.ndarray:
        names = self.covariate_names if names is None else tuple(names)
        cols = []
        for nm in names:
            try:
                j = self.covariate_names.index(nm)
            except ValueError:
                raise MissingColumn(f"unknown covariate {nm!r}", column=nm) from None
            cols.append([float(s.covariates[j]) for s in self.subjects])
        return np.array(cols, dtype=float).T.reshape(len(self.subjects), len(names))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.subjects:
            for t, z in zip(s.times, s.states):
                row = {"id": s.subject_id, "time": float(t), "state": self.state_space.labels[z]}
                row.update({nm: float(v) for nm, v in zip(self.covariate_names, s.covariates)})
                rows.append(row)
        return pd.DataFrame(rows, columns=["id", "time", "state", *self.covariate_names])


def validate_panel(data: PanelDataset) -> list:
    """Findings for observation pairs impossible under the allowed reachability closure."""
    findings = []
    ss = data.state_space
    reach = {k: ss.reachable(k) | {k} for k in range(ss.size)}
    for s in data.subjects:
        sid = s.subject_id.item() if hasattr(s.subject_id, "item") else s.subject_id
        for r in range(1, len(s.states)):
            a, b = int(s.states[r - 1]), int(s.states[r])
            if b not in reach[a]:
                findings.append({"kind": "impossible_transition", "subject": sid,
                                 "time": float(s.times[r]), "from": a, "to": b})
        hit = np.flatnonzero(np.isin(s.states, list(ss.absorbing)))
        if len(hit) > 1:
            findings.append({"kind": "repeated_absorbing", "subject": sid,
                             "count": int(len(hit))})
    return findings


def load_panel(path, schema=None, state_space=None, covariates=None,
               state_labels=None) -> PanelDataset:
    """Read (subject, time, state, covariates) rows; covariates are taken at the first visit.

    ``state_labels`` maps raw file values to state labels when they differ
    (e.g. ``{"1": "0 joints", ...}``); numeric codes are otherwise matched
    against labels first, then used as 0-based indices.
    """
    df = read_delimited(path)
    return panel_from_frame(df, schema, state_space, covariates, state_labels)


def panel_from_frame(df, schema=None, state_space=None, covariates=None,
                     state_labels=None) -> PanelDataset:
    schema = dict({"id": "id", "time": "time", "state": "state"}, **(schema or {}))
    covariates = list(covariates or [])
    for col in [schema["id"], schema["time"], schema["state"]] + covariates:
        if col not in df.columns:
            raise MissingColumn(f"column {col!r} not found", column=col)
    t = pd.to_numeric(df[schema["time"]], errors="coerce")
    if t.isna().any():
        raise NonNumericTime("non-numeric visit time", column=schema["time"])
    raw_states = df[schema["state"]].astype(str).str.strip()
    state_space = load_state_space(state_space)
    if state_space is None:
        uniq = sorted(raw_states.unique(), key=lambda x: (len(x), x))
        state_space = StateSpace.progressive(len(uniq), labels=uniq)

    def code(v):
        lab = state_labels.get(v, v) if state_labels else v
        if lab in state_space.labels:
            return state_space.labels.index(lab)
        if str(lab).isdigit() and int(lab) < state_space.size:
            return int(lab)
        raise UnknownStateLabel(f"unknown panel state {v!r}", label=v)

    states = np.array([code(v) for v in raw_states])
    work = pd.DataFrame({"id": df[schema["id"]].to_numpy(), "t": t.to_numpy(float),
                         "z": states})
    for c in covariates:
        work[c] = pd.to_numeric(df[c], errors="coerce").to_numpy(float)
    subjects = []
    for sid, g in work.groupby("id", sort=False):
        g = g.sort_values("t", kind="stable")
        first = g.iloc[0]
        cov = np.array([first[c] for c in covariates], dtype=float)
        if np.any(np.isnan(cov)):
            raise NonNumericTime(f"missing baseline covariate for subject {sid}")
        subjects.append(PanelSubject(sid, cov, g["t"].to_numpy(float), g["z"].to_numpy(int)))
    return PanelDataset(state_space, subjects, covariates)
