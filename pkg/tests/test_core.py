import json

import numpy as np
import pytest

from msmkit.core import (
    EpisodeDataset,
    StateSpace,
    at_risk_counts,
    event_times,
    load_episodes,
    load_panel,
    load_state_space,
    risk_set,
    validate,
    validate_panel,
    write_episodes,
)
from msmkit.errors import (
    DisallowedTransition,
    EmptyFile,
    InvalidStateSpace,
    MissingColumn,
    NonNumericTime,
    UnknownState,
    UnknownStateLabel,
)


def test_state_space_invariants():
    with pytest.raises(InvalidStateSpace):
        StateSpace(("a", "b"), frozenset(), frozenset({(0, 0)}))
    with pytest.raises(InvalidStateSpace):
        StateSpace(("a", "b"), frozenset({0}), frozenset({(0, 1)}))
    with pytest.raises(InvalidStateSpace):
        StateSpace(("a", "b"), frozenset({5}), frozenset())
    ss = StateSpace.illness_death()
    assert load_state_space(json.dumps(ss.to_dict())) == ss
    assert ss.reachable(0) == {1, 2, 3}
    with pytest.raises(UnknownState):
        ss.index("nope")


def test_load_colon_style_row(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text("id,time1,time2,state\n1,0,2.650240,recur\n1,2.650240,3.0,censor\n")
    ss = StateSpace(("(s0)", "recur", "dead"), frozenset({2}),
                    frozenset({(0, 1), (0, 2), (1, 2)}))
    ds = load_episodes(f, "id=id,tstart=time1,tstop=time2,state=state", ss)
    r = ds.records[0]
    assert (r.from_state, r.to_state, r.tstop) == (0, 1, 2.650240)
    assert ds.records[1].censored


def test_ingestion_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(EmptyFile):
        load_episodes(empty)
    bad = tmp_path / "b.csv"
    bad.write_text("id,tstart,tstop\n1,0,1\n")
    with pytest.raises(MissingColumn):
        load_episodes(bad)
    nn = tmp_path / "n.csv"
    nn.write_text("id,tstart,tstop,state\n1,0,abc,dead\n")
    with pytest.raises(NonNumericTime):
        load_episodes(nn)
    ss = StateSpace.two_state()
    lab = tmp_path / "l.csv"
    lab.write_text("id,tstart,tstop,state\n1,0,1,zombie\n")
    with pytest.raises(UnknownStateLabel):
        load_episodes(lab, None, ss)


def test_gap_loads_and_is_flagged(tmp_path):
    f = tmp_path / "g.csv"
    f.write_text("id,tstart,tstop,from,state\n1,0,2,0,1\n1,3,4,1,2\n2,0,1,0,censor\n")
    ss = StateSpace(("0", "1", "2"), frozenset({2}), frozenset({(0, 1), (1, 2)}))
    ds = load_episodes(f, "from=from", ss)
    kinds = {w["kind"] for w in validate(ds).warnings}
    assert "gap" in kinds


def test_validate_small_cases():
    ss = StateSpace.two_state()
    one = EpisodeDataset(ss, [1], [0.0], [1.0], [0], [1])
    rep = validate(one)
    assert rep.transition_counts == {(0, 1): 1} and rep.ok
    zero = EpisodeDataset(ss, [1], [1.0], [1.0], [0], [1])
    assert [w["kind"] for w in validate(zero).warnings] == ["zero_length"]


def test_simultaneous_jumps_are_flagged():
    ss = StateSpace(("0", "1", "2"), frozenset({2}), frozenset({(0, 1), (1, 2)}))
    ds = EpisodeDataset(ss, [1, 1], [0.0, 1.0], [1.0, 1.0], [0, 1], [1, 2])
    kinds = {w["kind"] for w in validate(ds).warnings}
    assert "simultaneous_transitions" in kinds or "zero_length" in kinds


def test_risk_set_d3(d3):
    assert risk_set(d3, 0, 1.0).count == 3
    assert risk_set(d3, 0, 3.0).count == 1
    assert risk_set(d3, 0, 3.0).ids == {"C"}
    assert risk_set(d3, 0, 10.0).count == 0


def test_risk_set_delayed_entry():
    ss = StateSpace.two_state()
    ds = EpisodeDataset(ss, [1, 2], [0.0, 2.0], [3.0, 5.0], [0, 0], [1, -1])
    assert risk_set(ds, 0, 1.0).count == 1
    assert risk_set(ds, 0, 2.0).count == 1   # entry at 2 is not at risk at 2
    assert risk_set(ds, 0, 2.5).count == 2


def test_event_times(d3):
    assert event_times(d3, (0, 1)) == [(1.0, 1)]
    with pytest.raises(DisallowedTransition):
        event_times(d3, (1, 2))
    ss = StateSpace.two_state()
    ds = EpisodeDataset(ss, [1, 2, 3], [0, 0, 0], [2.0, 2.0, 3.0], [0, 0, 0], [1, 1, -1])
    assert event_times(ds, (0, 1)) == [(2.0, 2)]


def test_counts_match_event_multiplicities(colon):
    rep = validate(colon)
    for tr, c in rep.transition_counts.items():
        assert sum(m for _, m in event_times(colon, tr)) == c


def test_risk_set_left_continuous(d3):
    for t in (1.0, 2.0, 3.0):
        assert risk_set(d3, 0, t).count == risk_set(d3, 0, t - 1e-9).count


def test_at_risk_counts_vectorised(d3):
    np.testing.assert_array_equal(at_risk_counts(d3, 0, [0.5, 1.0, 1.5, 2.0, 3.0]),
                                  [3, 3, 2, 2, 1])


def test_round_trip(tmp_path, colon):
    p = tmp_path / "rt.csv"
    write_episodes(colon, p)
    from msmkit.core import reload_schema
    again = load_episodes(p, reload_schema(colon), colon.state_space,
                          list(colon.covariate_names))
    assert again == colon


def test_panel_load_and_checks(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("id,time,state,x\n1,0,0,1\n1,1,1,1\n1,2,0,1\n2,0,0,0\n2,3,2,0\n2,4,2,0\n")
    ss = StateSpace.progressive(3)
    data = load_panel(f, None, ss, ["x"])
    assert len(data) == 2 and data.n_observations == 6
    kinds = [x["kind"] for x in validate_panel(data)]
    assert kinds == ["impossible_transition", "repeated_absorbing"]
