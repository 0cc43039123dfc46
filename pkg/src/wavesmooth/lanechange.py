"""Probabilistic cut-in and cut-out events for evaluation runs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from wavesmooth.core import LcParams, PiecewiseQuadratic, VehicleKind, VehicleState
from wavesmooth.dynamics import Platoon

CUT_IN, CUT_OUT, SUPPRESSED = "cut_in", "cut_out", "suppressed"
EVENT_HEADER = ("step", "ego_id", "event", "inserted_id", "gap_before", "gap_after")
BRAKE = 3.0  # deceleration assumed by the insertion safety check


@dataclass(frozen=True)
class LaneChangeEvent:
    """One lane-change record.

    ``inserted_id`` is the new vehicle for a cut-in, the removed vehicle for
    a cut-out and -1 for a suppressed cut-in. Gaps refer to the ego.
    """

    step: int
    ego_id: int
    event: str
    inserted_id: int
    gap_before: float
    gap_after: float

    def row(self) -> str:
        return f"{self.step},{self.ego_id},{self.event},{self.inserted_id},{self.gap_before:.6f},{self.gap_after:.6f}"


def eval_piecewise(pq: PiecewiseQuadratic, x, w=None):
    """Evaluate a piecewise quadratic. Arguments below the first breakpoint use the first piece."""
    x = np.asarray(x, dtype=float)
    bps = np.asarray(pq.breakpoints)
    rows = np.asarray(pq.coeffs)
    k = np.clip(np.searchsorted(bps, x, side="right") - 1, 0, len(bps) - 1)
    d = x - bps[k]
    c = rows[k]
    if rows.shape[1] == 3:
        return c[..., 0] + d * (c[..., 1] + d * c[..., 2])
    w = np.broadcast_to(np.asarray(w, dtype=float), x.shape)
    return (c[..., 0] + c[..., 1] * d + c[..., 2] * w + c[..., 3] * d * d
            + c[..., 4] * d * w + c[..., 5] * w * w)


def cut_in_prob(p: LcParams, h, v_lead):
    """Per-step probability that a vehicle cuts in ahead of an ego with gap ``h``."""
    return np.clip(eval_piecewise(p.p_in, h, v_lead), 0.0, 1.0)


def cut_out_prob(p: LcParams, v_lead):
    """Per-step probability that the ego's leader leaves the lane."""
    return np.clip(eval_piecewise(p.p_out, v_lead), 0.0, 1.0)


def constant_params(p_in: float, p_out: float, **kw) -> LcParams:
    """Lane-change parameters with constant probabilities."""
    return LcParams(p_in=PiecewiseQuadratic((0.0,), ((p_in, 0, 0, 0, 0, 0),)),
                    p_out=PiecewiseQuadratic((0.0,), ((p_out, 0, 0),)), **kw)


def apply_lane_changes(platoon: Platoon, p: LcParams, rng: np.random.Generator,
                       step: int = 0) -> list[LaneChangeEvent]:
    """Apply one step of lane changes to ``platoon`` in place.

    Egos are visited rear to front and each has at most one event, with
    cut-out tried first. A cut-out removes the ego's leader unless it is the
    trajectory leader or an AV. A cut-in places a human between the ego and
    its leader at the leader's speed, splitting the free space ``h - L`` in
    ratio ``r`` (leader side) with ``r ~ Normal(mu, sigma)`` clipped to
    ``ratio_clip``. It is suppressed when either new gap is below
    ``min_insert_gap`` or the ego could not brake to the newcomer's speed
    inside its new gap.

    Every ego draws two uniforms per call so the random stream does not
    depend on which events fire; only cut-ins draw the extra normal.
    """
    n = len(platoon)
    if n < 2:
        return []
    L = platoon.length
    gaps = platoon.gaps()
    v_lead = platoon.v[:-1]
    u = rng.random((n - 1, 2))
    p_out = cut_out_prob(p, v_lead)
    p_in = cut_in_prob(p, gaps[1:], v_lead)
    removable = np.arange(n - 1) >= 1
    removable &= platoon.kinds[:-1] != int(VehicleKind.AV)
    fire_out = removable & (u[:, 0] < p_out)
    fire_in = ~fire_out & (u[:, 1] < p_in)
    candidates = np.flatnonzero(fire_out | fire_in)
    if len(candidates) == 0:
        return []

    events: list[LaneChangeEvent] = []
    removed: set[int] = set()
    inserts: list[tuple[int, tuple]] = []  # ego index on the snapshot, (x, v, id)
    lo, hi = p.ratio_clip
    for c in candidates[::-1]:
        j = int(c) + 1
        if j in removed:
            continue
        ego = int(platoon.ids[j])
        h = float(gaps[j])
        if fire_out[c]:
            removed.add(j - 1)
            merged = float(platoon.x[j - 2] - platoon.x[j] - L)
            events.append(LaneChangeEvent(step, ego, CUT_OUT, int(platoon.ids[j - 1]), h, merged))
            continue
        r = float(np.clip(rng.normal(p.gap_ratio_mu, p.gap_ratio_sigma), lo, hi))
        free = h - L
        front, back = r * free, (1.0 - r) * free
        v_new = float(platoon.v[j - 1])
        closing = max(0.0, float(platoon.v[j]) - v_new)
        if min(front, back) < p.min_insert_gap or back - closing ** 2 / (2 * BRAKE) < p.min_insert_gap:
            events.append(LaneChangeEvent(step, ego, SUPPRESSED, -1, h, h))
            continue
        vid = platoon.reserve_id()
        inserts.append((j, (float(platoon.x[j - 1]) - L - front, v_new, vid)))
        events.append(LaneChangeEvent(step, ego, CUT_IN, vid, h, back))

    # apply front to rear so snapshot indices stay valid
    ops = [(j, None) for j in removed] + [(j, payload) for j, payload in inserts]
    for j, payload in sorted(ops, key=lambda o: o[0], reverse=True):
        if payload is None:
            platoon.remove(j)
        else:
            platoon.insert(j, VehicleKind.HUMAN, *payload)
    return events


def apply_to_states(states: Sequence[VehicleState], p: LcParams, rng: np.random.Generator,
                    step: int = 0) -> tuple[list[VehicleState], list[LaneChangeEvent]]:
    """Convenience form of :func:`apply_lane_changes` over a list of vehicle states."""
    pl = Platoon.from_states(states)
    events = apply_lane_changes(pl, p, rng, step)
    return pl.to_states(), events


def write_events(events: Sequence[LaneChangeEvent], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(EVENT_HEADER) + "\n")
        for ev in events:
            fh.write(ev.row() + "\n")


def read_events(path: str | Path) -> list[LaneChangeEvent]:
    with Path(path).open(newline="") as fh:
        return [LaneChangeEvent(int(r["step"]), int(r["ego_id"]), r["event"], int(r["inserted_id"]),
                                float(r["gap_before"]), float(r["gap_after"])) for r in csv.DictReader(fh)]
