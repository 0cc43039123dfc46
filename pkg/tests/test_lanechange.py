import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavesmooth.core import LcParams, PiecewiseQuadratic, VehicleKind, VehicleState
from wavesmooth.dynamics import Platoon
from wavesmooth.lanechange import (CUT_IN, CUT_OUT, SUPPRESSED, apply_lane_changes, apply_to_states,
                                   constant_params, cut_in_prob, cut_out_prob, eval_piecewise, read_events,
                                   write_events)

L = 5.0


def platoon(gaps, speeds=None, kinds=None):
    n = len(gaps) + 1
    speeds = speeds if speeds is not None else [20.0] * n
    kinds = kinds or [VehicleKind.LEADER] + [VehicleKind.HUMAN] * (n - 1)
    x = np.concatenate(([0.0], -np.cumsum(np.asarray(gaps, dtype=float) + L)))
    return Platoon(np.arange(n, dtype=np.int64), np.array([int(k) for k in kinds], dtype=np.int8), x,
                   np.asarray(speeds, dtype=float), np.zeros(n))


def test_minimal_gap_no_cut_in():
    p = LcParams()
    assert float(cut_in_prob(p, 2.0, 20.0)) == 0.0


def test_constant_probability():
    p = constant_params(0.01, 0.0)
    for h, v in [(5, 0), (50, 20), (1000, 35)]:
        assert float(cut_in_prob(p, h, v)) == pytest.approx(0.01)
    assert float(cut_out_prob(constant_params(0, 0.2), 10.0)) == pytest.approx(0.2)


def test_default_cut_in_grows_with_gap():
    p = LcParams()
    assert float(cut_in_prob(p, 100.0, 20.0)) >= float(cut_in_prob(p, 20.0, 20.0))


def test_piecewise_evaluation():
    pq = PiecewiseQuadratic((0.0, 10.0), ((1.0, 2.0, 0.5), (100.0, -1.0, 0.0)))
    assert float(eval_piecewise(pq, 4.0)) == pytest.approx(1 + 8 + 8)
    assert float(eval_piecewise(pq, 12.0)) == pytest.approx(98.0)
    assert float(eval_piecewise(pq, -1.0)) == pytest.approx(1 - 2 + 0.5)
    pq2 = PiecewiseQuadratic((0.0,), ((1.0, 2.0, 3.0, 4.0, 5.0, 6.0),))
    assert float(eval_piecewise(pq2, 2.0, 3.0)) == pytest.approx(1 + 4 + 9 + 16 + 30 + 54)


def test_zero_probabilities_change_nothing():
    pl = platoon([30.0, 40.0, 50.0])
    before = pl.copy()
    events = apply_lane_changes(pl, constant_params(0.0, 0.0), np.random.default_rng(0))
    assert events == []
    assert np.array_equal(pl.x, before.x) and np.array_equal(pl.ids, before.ids)


def test_forced_insertion_splits_gap():
    p = constant_params(1.0, 0.0, ratio_clip=(0.25, 0.75))
    pl = platoon([100.0])
    events = apply_lane_changes(pl, p, np.random.default_rng(1))
    assert [e.event for e in events] == [CUT_IN]
    g = pl.gaps()[1:]
    assert len(g) == 2
    assert g.sum() == pytest.approx(100.0 - L)
    # the clip bounds the split of the free space left after the newcomer's length
    assert g.min() >= 0.25 * (100.0 - L) - 1e-9
    assert pl.v[1] == pl.v[0] and pl.kinds[1] == int(VehicleKind.HUMAN)
    assert events[0].inserted_id == pl.ids[1] and events[0].gap_after == pytest.approx(g[1])


def test_insertion_suppressed_when_tight():
    pl = platoon([9.0])
    events = apply_lane_changes(pl, constant_params(1.0, 0.0), np.random.default_rng(0))
    assert [e.event for e in events] == [SUPPRESSED]
    assert len(pl) == 2


def test_insertion_suppressed_when_ego_cannot_brake():
    # ego at 30 behind a 0 m/s leader: the newcomer would need 150 m of braking room
    pl = platoon([80.0], speeds=[0.0, 30.0])
    events = apply_lane_changes(pl, constant_params(1.0, 0.0), np.random.default_rng(0))
    assert events[0].event == SUPPRESSED


def test_cut_out_never_removes_leader_or_av():
    kinds = [VehicleKind.LEADER, VehicleKind.AV, VehicleKind.HUMAN, VehicleKind.HUMAN]
    pl = platoon([30.0, 30.0, 30.0], kinds=kinds)
    events = apply_lane_changes(pl, constant_params(0.0, 1.0), np.random.default_rng(0))
    assert all(e.event == CUT_OUT for e in events)
    assert [e.inserted_id for e in events] == [2]
    assert list(pl.ids) == [0, 1, 3]


def test_binomial_cut_in_count():
    p = constant_params(0.01, 0.0)
    rng = np.random.default_rng(2024)
    egos, steps = 100, 1000
    count = 0
    for k in range(steps):
        pl = platoon([100.0] * egos)
        count += sum(e.event == CUT_IN for e in apply_lane_changes(pl, p, rng, step=k))
        assert np.all(pl.gaps()[1:] >= p.min_insert_gap)
    n = egos * steps
    assert abs(count - n * 0.01) <= 3 * math.sqrt(n * 0.01 * 0.99)


@given(st.lists(st.floats(4.0, 200.0), min_size=1, max_size=15), st.lists(st.floats(0, 35), min_size=16, max_size=16),
       st.floats(0, 1), st.floats(0, 0.5), st.integers(0, 2 ** 31))
def test_ordering_and_gaps_preserved(gaps, speeds, p_in, p_out, seed):
    pl = platoon(gaps, speeds=speeds[:len(gaps) + 1])
    lead_id, lead_x = pl.ids[0], pl.x[0]
    p = constant_params(p_in, p_out)
    events = apply_lane_changes(pl, p, np.random.default_rng(seed))
    assert pl.ids[0] == lead_id and pl.x[0] == lead_x
    assert np.all(np.diff(pl.x) < 0)
    assert np.all(pl.gaps()[1:] > 0)
    inserted = {e.inserted_id for e in events if e.event == CUT_IN}
    for j in np.flatnonzero(np.isin(pl.ids, list(inserted))):
        assert pl.gaps()[j] >= p.min_insert_gap and pl.gaps()[j + 1] >= p.min_insert_gap
    assert len({e.ego_id for e in events}) == len(events)


def test_states_wrapper_and_event_round_trip(tmp_path):
    states = platoon([100.0, 100.0]).to_states()
    new, events = apply_to_states(states, constant_params(1.0, 0.0), np.random.default_rng(3), step=9)
    assert len(new) == 3 + sum(e.event == CUT_IN for e in events)
    assert all(isinstance(s, VehicleState) for s in new)
    write_events(events, tmp_path / "ev.csv")
    back = read_events(tmp_path / "ev.csv")
    assert [(e.step, e.ego_id, e.event, e.inserted_id) for e in back] == \
        [(e.step, e.ego_id, e.event, e.inserted_id) for e in events]
