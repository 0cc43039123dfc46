"""Car-following dynamics: IDM, platoon integration and string stability."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from wavesmooth import kernels
from wavesmooth.core import VEHICLE_LENGTH, IdmParams, VehicleKind, VehicleState

__all__ = [
    "IdmParams", "CollisionError", "Platoon", "idm_accel", "equilibrium_gap", "string_stable",
    "stability_boundary", "perturbation_amplitudes", "step_platoon", "idm_accels",
]


class CollisionError(RuntimeError):
    """A follower's bumper-to-bumper gap dropped to zero or below."""

    def __init__(self, follower_id: int, leader_id: int, step: int, gap: float):
        self.follower_id = follower_id
        self.leader_id = leader_id
        self.step = step
        self.gap = gap
        super().__init__(f"collision at step {step}: vehicle {follower_id} hit vehicle {leader_id} (gap {gap:.3f} m)")


def idm_accel(p: IdmParams, v: float, v_lead: float, s: float) -> float:
    """IDM acceleration (unclipped) for own speed ``v``, leader speed and gap ``s``."""
    if s <= 0:
        raise ValueError(f"gap must be positive, got {s}")
    dv = v - v_lead
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / s) ** 2)


def equilibrium_gap(p: IdmParams, v: float) -> float:
    """Gap at which a follower at steady speed ``v`` has zero IDM acceleration."""
    if not 0 <= v < p.v0:
        raise ValueError(f"no finite equilibrium gap for v={v} (need 0 <= v < v0={p.v0})")
    return (p.s0 + v * p.T) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


@dataclass(frozen=True)
class StabilityResult:
    speed: float
    margin: float

    @property
    def stable(self) -> bool:
        return self.margin >= 0


def string_stable(p: IdmParams, v: float, h: float = 1e-4) -> StabilityResult:
    """Linear string-stability margin at equilibrium speed ``v``.

    margin = f_v^2/2 - f_v f_dv - f_s with partials of the acceleration with
    respect to gap (f_s), own speed at fixed relative speed (f_v) and
    relative speed ``v_lead - v`` (f_dv). Non-negative means stable.
    """
    if not 0 < v < p.v0:
        raise ValueError(f"need 0 < v < v0, got {v}")
    s = equilibrium_gap(p, v)
    f_s = (idm_accel(p, v, v, s + h) - idm_accel(p, v, v, s - h)) / (2 * h)
    f_v = (idm_accel(p, v + h, v + h, s) - idm_accel(p, v - h, v - h, s)) / (2 * h)
    f_dv = (idm_accel(p, v, v + h, s) - idm_accel(p, v, v - h, s)) / (2 * h)
    return StabilityResult(v, 0.5 * f_v ** 2 - f_v * f_dv - f_s)


def stability_boundary(p: IdmParams, lo: float = 1.0, hi: float | None = None, tol: float = 1e-6) -> float:
    """Speed where the stability margin changes sign, by bisection on [lo, hi]."""
    hi = 0.98 * p.v0 if hi is None else hi
    m_lo, m_hi = string_stable(p, lo).margin, string_stable(p, hi).margin
    if (m_lo >= 0) == (m_hi >= 0):
        raise ValueError(f"margin does not change sign on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if (string_stable(p, mid).margin >= 0) == (m_lo >= 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------- #
# platoon state


@dataclass
class Platoon:
    """Column-oriented platoon state; index 0 is the trajectory leader."""

    ids: np.ndarray
    kinds: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    length: float = VEHICLE_LENGTH
    next_id: int = field(default=0)

    def __post_init__(self):
        if self.next_id <= (int(self.ids.max()) if len(self.ids) else -1):
            self.next_id = int(self.ids.max()) + 1 if len(self.ids) else 0

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_states(cls, states: Sequence[VehicleState]) -> Platoon:
        lengths = {s.length for s in states}
        if len(lengths) > 1:
            raise ValueError("heterogeneous vehicle lengths are not supported")
        return cls(
            ids=np.array([s.id for s in states], dtype=np.int64),
            kinds=np.array([int(s.kind) for s in states], dtype=np.int8),
            x=np.array([s.position for s in states], dtype=float),
            v=np.array([s.speed for s in states], dtype=float),
            a=np.array([s.accel for s in states], dtype=float),
            length=lengths.pop() if lengths else VEHICLE_LENGTH,
        )

    def gaps(self) -> np.ndarray:
        g = np.full(len(self), np.inf)
        g[1:] = self.x[:-1] - self.x[1:] - self.length
        return g

    def to_states(self) -> list[VehicleState]:
        g = self.gaps()
        return [
            VehicleState(int(i), VehicleKind(int(k)), float(x), float(v), float(a),
                         None if j == 0 else float(g[j]), self.length)
            for j, (i, k, x, v, a) in enumerate(zip(self.ids, self.kinds, self.x, self.v, self.a))
        ]

    def copy(self) -> Platoon:
        return Platoon(self.ids.copy(), self.kinds.copy(), self.x.copy(), self.v.copy(), self.a.copy(),
                       self.length, self.next_id)

    def reserve_id(self) -> int:
        vid = self.next_id
        self.next_id += 1
        return vid

    def insert(self, index: int, kind: VehicleKind, x: float, v: float, vid: int | None = None) -> int:
        if vid is None:
            vid = self.reserve_id()
        self.ids = np.insert(self.ids, index, vid)
        self.kinds = np.insert(self.kinds, index, int(kind))
        self.x = np.insert(self.x, index, x)
        self.v = np.insert(self.v, index, v)
        self.a = np.insert(self.a, index, 0.0)
        return vid

    def remove(self, index: int) -> int:
        vid = int(self.ids[index])
        self.ids = np.delete(self.ids, index)
        self.kinds = np.delete(self.kinds, index)
        self.x = np.delete(self.x, index)
        self.v = np.delete(self.v, index)
        self.a = np.delete(self.a, index)
        return vid


def idm_accels(states: Sequence[VehicleState], p: IdmParams, a_lo: float = -3.0) -> np.ndarray:
    """Clipped IDM accelerations for every follower (0 for the leader)."""
    pl = Platoon.from_states(states)
    x = pl.x[None, :].copy()
    v = pl.v[None, :].copy()
    gaps = kernels.compute_gaps(x, pl.length, np.empty_like(x))
    out = np.zeros_like(x)
    mask = np.ones(x.shape, dtype=bool)
    mask[:, 0] = False
    kernels.idm_fill(v, gaps, mask, p.v0, p.T, p.s0, p.a_max, p.b, p.delta, a_lo, out)
    return out[0]


def step_platoon(states: Sequence[VehicleState], accels: Sequence[float], dt: float,
                 leader_speed: float | None = None, step: int = 0,
                 speed_bounds: tuple[float, float] = (0.0, 35.0)) -> list[VehicleState]:
    """Advance a platoon by one step.

    Followers use ``v' = clamp(v + a dt)`` then ``x' = x + v' dt``. The
    leader takes ``leader_speed`` (its replayed value) when given, with the
    position advanced by the trapezoidal rule; otherwise it is integrated
    like a follower. ``accel`` in the result is the applied acceleration.
    """
    pl = Platoon.from_states(states)
    a = np.asarray(accels, dtype=float)
    if a.shape != pl.x.shape or not np.all(np.isfinite(a)):
        raise ValueError("need one finite acceleration per vehicle")
    if np.any(np.diff(pl.x) >= 0):
        raise ValueError("positions must strictly decrease from front to rear")
    lo, hi = speed_bounds
    if leader_speed is None:
        v_lead = float(np.clip(pl.v[0] + a[0] * dt, lo, hi))
        x_lead = pl.x[0] + v_lead * dt
    else:
        v_lead = float(leader_speed)
        x_lead = pl.x[0] + 0.5 * (pl.v[0] + v_lead) * dt
    x = pl.x[None, :].copy()
    v = pl.v[None, :].copy()
    a_eff = np.empty_like(x)
    gmin, _, col = kernels.advance(x, v, np.ascontiguousarray(a[None, :]), np.array([x_lead]),
                                   np.array([v_lead]), dt, lo, hi, pl.length, a_eff)
    if gmin <= 0:
        raise CollisionError(int(pl.ids[col]), int(pl.ids[col - 1]), step, gmin)
    pl.x, pl.v, pl.a = x[0], v[0], a_eff[0]
    return pl.to_states()


def perturbation_amplitudes(p: IdmParams, v_eq: float, n: int = 20, dip: float = 0.5,
                            duration: float = 60.0, horizon: float = 600.0, dt: float = 0.1) -> np.ndarray:
    """Simulate an IDM platoon answering a smooth speed dip of the leader.

    Returns the L2 norm over time of each vehicle's speed deviation
    (index 0 is the leader). Growth from vehicle 2 to vehicle ``n`` signals
    string instability.
    """
    s = equilibrium_gap(p, v_eq)
    L = VEHICLE_LENGTH
    x = (-np.arange(n + 1) * (s + L))[None, :].astype(float)
    v = np.full((1, n + 1), float(v_eq))
    acc = np.zeros_like(x)
    gaps = np.empty_like(x)
    a_eff = np.empty_like(x)
    mask = np.ones(x.shape, dtype=bool)
    mask[:, 0] = False
    steps = int(round(horizon / dt))
    t = np.arange(1, steps + 1) * dt
    phase = (t - 5.0) / duration
    lead = v_eq - np.where((phase >= 0) & (phase <= 1), dip * 0.5 * (1 - np.cos(2 * np.pi * phase)), 0.0)
    x_lead = x[0, 0] + np.cumsum(0.5 * (np.concatenate(([v_eq], lead[:-1])) + lead) * dt)
    sq = np.zeros(n + 1)
    for k in range(steps):
        kernels.compute_gaps(x, L, gaps)
        kernels.idm_fill(v, gaps, mask, p.v0, p.T, p.s0, p.a_max, p.b, p.delta, -3.0, acc)
        gmin, _, _ = kernels.advance(x, v, acc, x_lead[k:k + 1], lead[k:k + 1], dt, 0.0, 35.0, L, a_eff)
        if gmin <= 0:
            raise CollisionError(-1, -1, k, gmin)
        sq += (v[0] - v_eq) ** 2 * dt
    return np.sqrt(sq)
