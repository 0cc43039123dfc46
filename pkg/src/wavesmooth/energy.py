"""Fuel-rate model and fleet energy metrics.

The fuel rate is a polynomial in speed and acceleration (zero road grade)
floored at an idle rate. Default coefficients come from a least-squares fit
to a simple road-load power model of a compact SUV, see
:func:`physics_fuel_rate` and :func:`fit_coefficients`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from wavesmooth.core import ENERGY_BASIS, MILE, EnergyParams

__all__ = [
    "EnergyParams", "FuelModel", "fuel_rate", "physics_fuel_rate", "fit_coefficients", "system_mpg",
    "mpg_improvement", "throughput", "crossing_times", "RunDescriptor",
]

V_DOMAIN = (0.0, 35.0)
A_DOMAIN = (-3.0, 1.5)

# road-load constants of the fit target
MASS = 1717.0
AIR_DENSITY = 1.225
DRAG_AREA = 0.84
ROLLING = 0.015
GRAVITY = 9.81
EFFICIENCY = 0.25
GALLON_ENERGY = 1.21e8
IDLE = 2.0e-4


def physics_fuel_rate(v, a):
    """Fuel rate (gallons/s) from engine power; negative power burns only idle fuel."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    power = MASS * a * v + 0.5 * AIR_DENSITY * DRAG_AREA * v ** 3 + ROLLING * MASS * GRAVITY * v
    return np.maximum(0.0, power) / (EFFICIENCY * GALLON_ENERGY) + IDLE


def _basis(v, a):
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return np.stack([np.ones_like(v), v, v ** 2, v ** 3, a * v, a * a * v, a, a * a], axis=-1)


def fit_coefficients(dv: float = 0.5, da: float = 0.1) -> EnergyParams:
    """Least-squares fit of the polynomial basis to :func:`physics_fuel_rate`.

    Only grid points with positive engine power enter the fit; the idle
    floor covers the rest.
    """
    v, a = np.meshgrid(np.arange(V_DOMAIN[0], V_DOMAIN[1] + 1e-9, dv),
                       np.arange(A_DOMAIN[0], A_DOMAIN[1] + 1e-9, da), indexing="ij")
    v, a = v.ravel(), a.ravel()
    y = physics_fuel_rate(v, a)
    traction = y > IDLE
    c, *_ = np.linalg.lstsq(_basis(v[traction], a[traction]), y[traction], rcond=None)
    coeffs = {name: float(f"{val:.9g}") if abs(val) > 1e-15 else 0.0 for name, val in zip(ENERGY_BASIS, c)}
    return EnergyParams(**coeffs, idle_floor=IDLE)


class FuelModel:
    """Vectorised fuel rate with an out-of-domain counter.

    Inputs outside v in [0, 35] or a in [-3, 1.5] are clamped into the domain
    and counted in ``clamped``.
    """

    def __init__(self, params: EnergyParams | None = None):
        self.params = params or EnergyParams()
        self._c = np.array(self.params.coeffs)
        self.clamped = 0
        self._check_floor()
        self.clamped = 0

    def _check_floor(self):
        v, a = np.meshgrid(np.arange(0.0, 35.01, 0.5), np.arange(-3.0, 1.501, 0.1), indexing="ij")
        g = self(v, a)
        if np.any(g < self.params.idle_floor) or not np.all(np.isfinite(g)):
            raise ValueError("fuel polynomial violates the idle floor on the domain grid")

    def __call__(self, v, a):
        v = np.asarray(v, dtype=float)
        a = np.asarray(a, dtype=float)
        vc = np.clip(v, *V_DOMAIN)
        ac = np.clip(a, *A_DOMAIN)
        self.clamped += int(np.count_nonzero((vc != v) | (ac != a)))
        c = self._c
        poly = c[0] + vc * (c[1] + vc * (c[2] + vc * c[3])) + ac * vc * (c[4] + ac * c[5]) + ac * (c[6] + ac * c[7])
        return np.maximum(self.params.idle_floor, poly)


def fuel_rate(p: EnergyParams, v: float, a: float) -> float:
    """Instantaneous fuel rate in gallons/s."""
    return float(_scalar_model(p)(v, a))


_MODELS: dict[EnergyParams, FuelModel] = {}


def _scalar_model(p: EnergyParams) -> FuelModel:
    model = _MODELS.get(p)
    if model is None:
        model = _MODELS[p] = FuelModel(p)
    return model


def system_mpg(distances: Sequence[float], fuel: Sequence[float]) -> float:
    """Total miles over total gallons. Returns NaN when no fuel was burnt."""
    d = np.asarray(distances, dtype=float)
    f = np.asarray(fuel, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    total = float(f.sum())
    if total <= 0:
        return math.nan
    return float(d.sum()) / MILE / total


@dataclass(frozen=True)
class RunDescriptor:
    """What must match between a controlled run and its baseline."""

    traj_id: str
    platoon_size: int
    seed: int
    lc_enabled: bool


def mpg_improvement(controlled: Mapping, baseline: Mapping) -> float:
    """Percent change of system MPG relative to the baseline run.

    Both arguments are mappings with ``system_mpg`` and ``descriptor``
    (a :class:`RunDescriptor`); mismatched descriptors raise ValueError.
    """
    if controlled["descriptor"] != baseline["descriptor"]:
        raise ValueError(f"runs are not comparable: {controlled['descriptor']} vs {baseline['descriptor']}")
    return 100.0 * (controlled["system_mpg"] / baseline["system_mpg"] - 1.0)


def crossing_times(ids, t, x, position: float) -> dict[int, float]:
    """First time each vehicle reaches ``position``, interpolated between samples.

    ``ids``, ``t`` and ``x`` are parallel flat arrays of time-space records.
    """
    ids = np.asarray(ids)
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    out: dict[int, float] = {}
    if len(ids) == 0:
        return out
    order = np.lexsort((t, ids))
    ids, t, x = ids[order], t[order], x[order]
    same = ids[1:] == ids[:-1]
    hit = same & (x[:-1] < position) & (x[1:] >= position)
    for k in np.flatnonzero(hit):
        vid = int(ids[k])
        if vid in out:
            continue
        frac = (position - x[k]) / (x[k + 1] - x[k])
        out[vid] = float(t[k] + frac * (t[k + 1] - t[k]))
    return out


def throughput(tsd, position: float, window: float, t_start: float | None = None) -> float:
    """Vehicles per hour crossing ``position`` during ``[t_start, t_start + window)``.

    ``tsd`` is anything with flat ``ids``, ``t`` and ``x`` arrays. Without
    ``t_start`` the window opens at the first crossing.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    times = sorted(crossing_times(tsd.ids, tsd.t, tsd.x, position).values())
    if not times:
        return 0.0
    t0 = times[0] if t_start is None else t_start
    count = sum(1 for tc in times if t0 <= tc < t0 + window)
    return count * 3600.0 / window


def platoon_flow(times: Sequence[float]) -> float:
    """Flow (veh/h) of a platoon passing a point: (k - 1) headways over the passage time."""
    times = sorted(times)
    if len(times) < 2 or times[-1] <= times[0]:
        return 0.0
    return float((len(times) - 1) * 3600.0 / (times[-1] - times[0]))
