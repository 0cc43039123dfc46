import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from wavesmooth.core import IdmParams, VehicleKind, VehicleState
from wavesmooth.dynamics import (CollisionError, Platoon, equilibrium_gap, idm_accel, idm_accels,
                                 perturbation_amplitudes, stability_boundary, step_platoon, string_stable)

P = IdmParams()


def bisect_gap(p, v, lo=1e-6, hi=1e5):
    # acceleration rises with the gap, zero crossing is the equilibrium
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if idm_accel(p, v, v, mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def column(n, v, gap, kinds=None, length=5.0):
    kinds = kinds or [VehicleKind.LEADER] + [VehicleKind.HUMAN] * (n - 1)
    return [VehicleState(i, kinds[i], -i * (gap + length), v, 0.0, None if i == 0 else gap, length)
            for i in range(n)]


def test_standstill_equilibrium():
    assert idm_accel(P, 0.0, 0.0, P.s0) == 0.0


def test_free_flow_limit():
    a = idm_accel(P, P.v0, P.v0, 1e9)
    assert a <= 0 and abs(a) < 1e-6 * P.a_max


def test_equilibrium_gap_values():
    assert equilibrium_gap(P, 0.0) == P.s0
    s15 = equilibrium_gap(P, 15.0)
    assert abs(idm_accel(P, 15.0, 15.0, s15)) <= 1e-9
    assert s15 == pytest.approx(bisect_gap(P, 15.0), abs=1e-6)
    far, near = equilibrium_gap(P, 0.999 * P.v0), equilibrium_gap(P, 0.9 * P.v0)
    assert math.isfinite(far) and far > near
    with pytest.raises(ValueError):
        equilibrium_gap(P, P.v0)


def test_nonpositive_gap_rejected():
    with pytest.raises(ValueError):
        idm_accel(P, 10.0, 10.0, 0.0)


@given(st.floats(0, 34.9), st.floats(0, 34.9))
def test_equilibrium_gap_increasing(v1, v2):
    assume(abs(v1 - v2) > 1e-9)
    lo, hi = sorted((v1, v2))
    assert equilibrium_gap(P, lo) < equilibrium_gap(P, hi)


# gaps of at least one vehicle length keep the gap derivative below the probe constant
@given(st.floats(0, 34), st.floats(0, 34), st.floats(5, 500), st.integers(0, 2), st.floats(-1e-6, 1e-6))
def test_idm_lipschitz_probe(v, vl, s, which, eps):
    args = [v, vl, s]
    moved = list(args)
    moved[which] += eps
    assert abs(idm_accel(P, *moved) - idm_accel(P, *args)) <= 1e4 * abs(eps) + 1e-12


def test_stability_signs_and_boundary():
    assert not string_stable(P, 10.0).stable
    assert string_stable(P, 25.0).stable
    assert string_stable(P, 17.0).margin < 0 < string_stable(P, 19.0).margin
    assert 17.0 <= stability_boundary(P) <= 19.0


@pytest.mark.parametrize("v", [10.0, 25.0])
def test_perturbation_oracle_agrees_with_criterion(v):
    amp = perturbation_amplitudes(P, v)
    growth = amp[20] / amp[2]
    assert (growth < 1.0) == string_stable(P, v).stable


def test_step_arithmetic():
    st_ = [VehicleState(0, VehicleKind.LEADER, 100.0, 10.0, 0.0, None),
           VehicleState(1, VehicleKind.HUMAN, 0.0, 1.0, 0.0, 95.0),
           VehicleState(2, VehicleKind.HUMAN, -50.0, 0.2, 0.0, 45.0)]
    out = step_platoon(st_, [0.0, -3.0, -3.0], 0.1)
    assert out[1].speed == pytest.approx(0.7) and out[1].position == pytest.approx(0.07)
    assert out[2].speed == 0.0 and out[2].position == -50.0
    assert out[2].accel == pytest.approx(-2.0)
    assert out[0].position == pytest.approx(101.0)


def test_leader_replay_trapezoid():
    st_ = column(2, 10.0, 30.0)
    out = step_platoon(st_, [0.0, 0.0], 0.1, leader_speed=12.0)
    assert out[0].speed == 12.0 and out[0].position == pytest.approx(1.1)


def test_equilibrium_preserved_200_vehicles():
    v = 20.0
    states = column(200, v, equilibrium_gap(P, v))
    for k in range(500):
        acc = idm_accels(states, P)
        states = step_platoon(states, acc, 0.1, leader_speed=v, step=k)
    speeds = np.array([s.speed for s in states])
    assert np.max(np.abs(speeds - v)) <= 1e-6


def test_collision_reports_ids_and_step():
    st_ = [VehicleState(0, VehicleKind.LEADER, 10.0, 0.0, 0.0, None),
           VehicleState(7, VehicleKind.HUMAN, 4.0, 20.0, 0.0, 1.0)]
    with pytest.raises(CollisionError) as err:
        step_platoon(st_, [0.0, 0.0], 0.1, leader_speed=0.0, step=42)
    e = err.value
    assert (e.follower_id, e.leader_id, e.step) == (7, 0, 42) and e.gap <= 0


def test_bad_inputs():
    st_ = column(3, 10.0, 20.0)
    with pytest.raises(ValueError):
        step_platoon(st_, [0.0, np.nan, 0.0], 0.1)
    with pytest.raises(ValueError):
        step_platoon(st_, [0.0, 0.0], 0.1)
    swapped = [st_[0], st_[2], st_[1]]
    with pytest.raises(ValueError):
        step_platoon(swapped, [0.0] * 3, 0.1)


@given(st.lists(st.tuples(st.floats(0.5, 60), st.floats(0, 35), st.floats(-3, 1.5)), min_size=1, max_size=12),
       st.floats(0, 35))
def test_step_ordered_or_collision(rows, v_lead):
    x, states = 0.0, [VehicleState(0, VehicleKind.LEADER, 0.0, v_lead, 0.0, None)]
    for i, (gap, v, _) in enumerate(rows, start=1):
        x -= gap + 5.0
        states.append(VehicleState(i, VehicleKind.HUMAN, x, v, 0.0, gap))
    acc = [0.0] + [a for _, _, a in rows]
    try:
        out = step_platoon(states, acc, 0.1, leader_speed=v_lead)
    except CollisionError:
        return
    pos = np.array([s.position for s in out])
    assert np.all(np.diff(pos) < 0)
    assert all(s.gap > 0 for s in out[1:])
    assert all(0.0 <= s.speed <= 35.0 for s in out)


def test_platoon_insert_remove():
    pl = Platoon.from_states(column(3, 10.0, 20.0))
    vid = pl.insert(1, VehicleKind.HUMAN, -10.0, 10.0)
    assert vid == 3 and list(pl.ids) == [0, 3, 1, 2]
    assert pl.remove(1) == 3 and list(pl.ids) == [0, 1, 2]
    assert pl.reserve_id() == 4
    g = pl.gaps()
    assert math.isinf(g[0]) and g[1] == pytest.approx(20.0)
