"""Shared domain types, unit conventions and configuration handling.

All quantities are SI internally (m, s, m/s, m/s^2). Fuel is carried in
US gallons; conversion to miles happens only in the metrics.

The configuration file is YAML with one section per subsystem::

    seed: 7
    sim:       {dt: 0.1, action_repeat: 10, ...}
    idm:       {v0: 35.0, T: 1.0, ...}
    energy:    {...}
    lanechange: {...}
    planner:   {...}
    reward:    {c1: 0.06, ...}
    train:     {gamma: 0.999, ...}

Every section and key is optional; absent keys take the defaults below.
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

VEHICLE_LENGTH = 5.0
MILE = 1609.34


class ConfigError(ValueError):
    """Invalid configuration value; carries the offending field and value."""

    def __init__(self, field_name: str, value: Any, reason: str):
        self.field = field_name
        self.value = value
        super().__init__(f"{field_name}={value!r}: {reason}")


class VehicleKind(enum.IntEnum):
    LEADER = 0
    AV = 1
    HUMAN = 2


_KIND_NAMES = {"leader": VehicleKind.LEADER, "av": VehicleKind.AV, "human": VehicleKind.HUMAN}


def _require(cond: bool, name: str, value: Any, reason: str) -> None:
    if not cond:
        raise ConfigError(name, value, reason)


def _finite(name: str, value: Any) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, value, "not a number") from None
    _require(math.isfinite(out), name, value, "must be finite")
    return out


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters.

    The defaults put the linear string-stability boundary at about
    18.2 m/s (see ``scripts/calibrate_idm.py``).
    """

    v0: float = 35.0
    T: float = 1.0
    s0: float = 2.0
    a_max: float = 1.55
    b: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for f in ("v0", "T", "s0", "a_max", "b", "delta"):
            v = _finite(f"idm.{f}", getattr(self, f))
            _require(v > 0, f"idm.{f}", v, "must be > 0")
        _require(self.delta >= 1, "idm.delta", self.delta, "must be >= 1")


# basis order for the fuel polynomial
ENERGY_BASIS = ("c_const", "c_v", "c_v2", "c_v3", "c_av", "c_a2v", "c_a", "c_a2")


@dataclass(frozen=True)
class EnergyParams:
    """Fuel-rate polynomial g(v, a) in gallons/s at zero grade.

    Defaults are the least-squares fit produced by
    :func:`wavesmooth.energy.fit_coefficients`.
    """

    c_const: float = 2.0e-4
    c_v: float = 8.35228264e-06
    c_v2: float = 0.0
    c_v3: float = 1.70082645e-08
    c_av: float = 5.67603306e-05
    c_a2v: float = 0.0
    c_a: float = 0.0
    c_a2: float = 0.0
    idle_floor: float = 2.0e-4

    def __post_init__(self):
        for f in ENERGY_BASIS:
            _finite(f"energy.{f}", getattr(self, f))
        floor = _finite("energy.idle_floor", self.idle_floor)
        _require(floor >= 0, "energy.idle_floor", floor, "must be >= 0")

    @property
    def coeffs(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in ENERGY_BASIS)


@dataclass(frozen=True)
class PiecewiseQuadratic:
    """Piecewise second-order polynomial.

    ``breakpoints[k]`` is where piece ``k`` starts; each piece is evaluated
    in local coordinates ``d = x - breakpoints[k]``. Rows hold either three
    coefficients ``(1, d, d^2)`` for a one-argument function or six
    ``(1, d, w, d^2, d*w, w^2)`` for a function of ``(x, w)``.
    """

    breakpoints: tuple[float, ...]
    coeffs: tuple[tuple[float, ...], ...]

    def validate(self, name: str, width: int) -> None:
        _require(len(self.breakpoints) >= 1, f"{name}.breakpoints", self.breakpoints, "need at least one piece")
        _require(len(self.coeffs) == len(self.breakpoints), f"{name}.coeffs", self.coeffs,
                 "one coefficient row per breakpoint")
        bps = [_finite(f"{name}.breakpoints", b) for b in self.breakpoints]
        _require(all(b1 < b2 for b1, b2 in zip(bps, bps[1:])), f"{name}.breakpoints", self.breakpoints,
                 "must be strictly increasing")
        for row in self.coeffs:
            _require(len(row) == width, f"{name}.coeffs", row, f"rows need {width} coefficients")
            for c in row:
                _finite(f"{name}.coeffs", c)


def _default_p_in() -> PiecewiseQuadratic:
    # zero below 10 m, quadratic ramp to 100 m, then linear with matched slope
    return PiecewiseQuadratic(
        breakpoints=(0.0, 10.0, 100.0),
        coeffs=(
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            (0.0, 0.0, 0.0, 2.0e-8, 0.0, 0.0),
            (1.62e-4, 3.6e-6, 0.0, 0.0, 0.0, 0.0),
        ),
    )


def _default_p_out() -> PiecewiseQuadratic:
    return PiecewiseQuadratic(breakpoints=(0.0,), coeffs=((2.0e-5, 0.0, 0.0),))


@dataclass(frozen=True)
class LcParams:
    """Cut-in / cut-out model. Defaults are plausible values, not a data fit."""

    p_in: PiecewiseQuadratic = field(default_factory=_default_p_in)
    p_out: PiecewiseQuadratic = field(default_factory=_default_p_out)
    gap_ratio_mu: float = 0.5
    gap_ratio_sigma: float = 0.15
    ratio_clip: tuple[float, float] = (0.2, 0.8)
    min_insert_gap: float = 4.0

    def __post_init__(self):
        self.p_in.validate("lanechange.p_in", 6)
        self.p_out.validate("lanechange.p_out", 3)
        _finite("lanechange.gap_ratio_mu", self.gap_ratio_mu)
        sigma = _finite("lanechange.gap_ratio_sigma", self.gap_ratio_sigma)
        _require(sigma > 0, "lanechange.gap_ratio_sigma", sigma, "must be > 0")
        _require(len(self.ratio_clip) == 2, "lanechange.ratio_clip", self.ratio_clip, "need [lo, hi]")
        lo, hi = (_finite("lanechange.ratio_clip", c) for c in self.ratio_clip)
        _require(0 < lo < hi < 1, "lanechange.ratio_clip", self.ratio_clip, "need 0 < lo < hi < 1")
        g = _finite("lanechange.min_insert_gap", self.min_insert_gap)
        _require(g > 0, "lanechange.min_insert_gap", g, "must be > 0")


@dataclass(frozen=True)
class PlannerParams:
    enabled: bool = True
    bandwidth: float = 300.0
    segment_length: float = 800.0
    knot_spacing: float = 10.0
    delay: float = 180.0
    update_interval: float = 60.0
    cold_start_speed: float = 35.0

    def __post_init__(self):
        for f in ("bandwidth", "segment_length", "knot_spacing", "update_interval"):
            v = _finite(f"planner.{f}", getattr(self, f))
            _require(v > 0, f"planner.{f}", v, "must be > 0")
        d = _finite("planner.delay", self.delay)
        _require(d >= 0, "planner.delay", d, "must be >= 0")
        c = _finite("planner.cold_start_speed", self.cold_start_speed)
        _require(0 <= c <= 40, "planner.cold_start_speed", c, "must be in [0, 40]")


@dataclass(frozen=True)
class RewardCoeffs:
    """Reward weights.

    ``energy_scale`` converts fuel rates from gallons/s before they enter
    the reward; the default 3600 expresses them in gallons/hour.
    """

    c1: float = 0.06
    c2: float = 0.02
    c3: float = 0.6
    c4: float = 0.005
    platoon_size_n: int = 8
    energy_scale: float = 3600.0

    def __post_init__(self):
        for f in ("c1", "c2", "c3", "c4"):
            v = _finite(f"reward.{f}", getattr(self, f))
            _require(v >= 0, f"reward.{f}", v, "must be >= 0")
        _require(isinstance(self.platoon_size_n, int) and not isinstance(self.platoon_size_n, bool)
                 and self.platoon_size_n >= 1, "reward.platoon_size_n", self.platoon_size_n, "must be an integer >= 1")
        s = _finite("reward.energy_scale", self.energy_scale)
        _require(s > 0, "reward.energy_scale", s, "must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.999
    gae_lambda: float = 0.99
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs_per_iter: int = 5
    iterations: int = 200
    batch_size: int = 1500
    minibatch_size: int = 500
    value_coeff: float = 0.5
    entropy_coeff: float = 0.0
    max_grad_norm: float = 0.5
    clip_value: float | None = None
    log_std_init: float = -1.0
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    checkpoint_every: int = 50
    trajectories: tuple[str, ...] = ("train_1", "train_2", "train_3", "train_4")

    def __post_init__(self):
        for f in ("gamma", "gae_lambda"):
            v = _finite(f"train.{f}", getattr(self, f))
            _require(0 < v <= 1, f"train.{f}", v, "must be in (0, 1]")
        for f in ("clip_eps", "lr"):
            v = _finite(f"train.{f}", getattr(self, f))
            _require(v > 0, f"train.{f}", v, "must be > 0")
        for f in ("epochs_per_iter", "iterations", "batch_size", "minibatch_size", "checkpoint_every"):
            v = getattr(self, f)
            _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, f"train.{f}", v,
                     "must be an integer >= 1")
        _require(self.minibatch_size <= self.batch_size, "train.minibatch_size", self.minibatch_size,
                 "must not exceed batch_size")
        for f in ("value_coeff", "entropy_coeff", "max_grad_norm"):
            v = _finite(f"train.{f}", getattr(self, f))
            _require(v >= 0, f"train.{f}", v, "must be >= 0")
        if self.clip_value is not None:
            v = _finite("train.clip_value", self.clip_value)
            _require(v > 0, "train.clip_value", v, "must be > 0 or null")
        _finite("train.log_std_init", self.log_std_init)
        _require(len(self.hidden) >= 1 and all(isinstance(h, int) and h >= 1 for h in self.hidden),
                 "train.hidden", self.hidden, "need positive integer layer widths")
        _require(len(self.trajectories) >= 1, "train.trajectories", self.trajectories, "need at least one")


def _default_layout() -> tuple[VehicleKind, ...]:
    return (VehicleKind.LEADER, VehicleKind.AV) + (VehicleKind.HUMAN,) * 7


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    action_repeat: int = 10
    horizon_env_steps: int = 50
    platoon_layout: tuple[VehicleKind, ...] = field(default_factory=_default_layout)
    speed_bounds: tuple[float, float] = (0.0, 35.0)
    accel_bounds: tuple[float, float] = (-3.0, 1.5)
    vehicle_length: float = VEHICLE_LENGTH
    seed: int = 0
    idm: IdmParams = field(default_factory=IdmParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    lanechange: LcParams = field(default_factory=LcParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    reward: RewardCoeffs = field(default_factory=RewardCoeffs)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        dt = _finite("sim.dt", self.dt)
        _require(dt > 0, "sim.dt", dt, "must be > 0")
        _require(isinstance(self.action_repeat, int) and self.action_repeat >= 1, "sim.action_repeat",
                 self.action_repeat, "must be an integer >= 1")
        _require(isinstance(self.horizon_env_steps, int) and self.horizon_env_steps >= 1,
                 "sim.horizon_env_steps", self.horizon_env_steps, "must be an integer >= 1")
        lo, hi = (_finite("sim.speed_bounds", v) for v in self.speed_bounds)
        _require(lo < hi, "sim.speed_bounds", self.speed_bounds, "need v_lo < v_hi")
        alo, ahi = (_finite("sim.accel_bounds", v) for v in self.accel_bounds)
        _require(alo < ahi, "sim.accel_bounds", self.accel_bounds, "need a_lo < a_hi")
        L = _finite("sim.vehicle_length", self.vehicle_length)
        _require(L > 0, "sim.vehicle_length", L, "must be > 0")
        layout = self.platoon_layout
        _require(len(layout) >= 2 and layout[0] == VehicleKind.LEADER, "sim.platoon_layout", layout,
                 "need a trajectory leader first and at least one follower")
        _require(all(k != VehicleKind.LEADER for k in layout[1:]), "sim.platoon_layout", layout,
                 "only the first vehicle may be the leader")
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", self.seed, "must be an unsigned integer")
        _require(self.reward.platoon_size_n <= len(layout) - 1, "reward.platoon_size_n",
                 self.reward.platoon_size_n, "exceeds the number of followers in sim.platoon_layout")
        _require(self.lanechange.min_insert_gap >= self.idm.s0, "lanechange.min_insert_gap",
                 self.lanechange.min_insert_gap, "must be >= idm.s0")

    @property
    def horizon_sim_steps(self) -> int:
        return self.horizon_env_steps * self.action_repeat


@dataclass
class VehicleState:
    """Kinematic record of one vehicle at one step. ``gap`` is None for the front vehicle."""

    id: int
    kind: VehicleKind
    position: float
    speed: float
    accel: float = 0.0
    gap: float | None = None
    length: float = VEHICLE_LENGTH


# --------------------------------------------------------------------------- #
# (de)serialization

_SECTIONS = {
    "idm": IdmParams,
    "energy": EnergyParams,
    "lanechange": LcParams,
    "planner": PlannerParams,
    "reward": RewardCoeffs,
    "train": TrainConfig,
}
_SIM_KEYS = ("dt", "action_repeat", "horizon_env_steps", "platoon_layout", "speed_bounds",
             "accel_bounds", "vehicle_length")


def parse_layout(items: Sequence[str]) -> tuple[VehicleKind, ...]:
    """Parse ``["leader", "av", "human*7"]`` into a kind tuple."""
    out: list[VehicleKind] = []
    for item in items:
        name, _, count = str(item).partition("*")
        name = name.strip().lower()
        if name not in _KIND_NAMES:
            raise ConfigError("sim.platoon_layout", item, "unknown vehicle kind")
        try:
            n = int(count) if count else 1
        except ValueError:
            raise ConfigError("sim.platoon_layout", item, "bad repeat count") from None
        if n < 1:
            raise ConfigError("sim.platoon_layout", item, "bad repeat count")
        out.extend([_KIND_NAMES[name]] * n)
    return tuple(out)


def format_layout(layout: Sequence[VehicleKind]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(layout):
        j = i
        while j < len(layout) and layout[j] == layout[i]:
            j += 1
        name = layout[i].name.lower()
        out.append(name if j - i == 1 else f"{name}*{j - i}")
        i = j
    return out


def _check_keys(section: str, data: Mapping, allowed) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(section, data, "expected a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}" if section else unknown[0], data[unknown[0]], "unknown key")


def _coerce(cls, section: str, data: Mapping):
    names = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(section, data, names)
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if cls is LcParams and key in ("p_in", "p_out"):
            _check_keys(f"{section}.{key}", value, ("breakpoints", "coeffs"))
            try:
                kwargs[key] = PiecewiseQuadratic(
                    breakpoints=tuple(float(b) for b in value.get("breakpoints", ())),
                    coeffs=tuple(tuple(float(c) for c in row) for row in value.get("coeffs", ())),
                )
            except (TypeError, ValueError):
                raise ConfigError(f"{section}.{key}", value, "malformed piecewise polynomial") from None
        elif key in ("ratio_clip", "hidden", "trajectories"):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{key}", value, "expected a list")
            conv = {"ratio_clip": float, "hidden": int, "trajectories": str}[key]
            try:
                kwargs[key] = tuple(conv(v) for v in value)
            except (TypeError, ValueError):
                raise ConfigError(f"{section}.{key}", value, "bad list element") from None
        elif key == "clip_value":
            kwargs[key] = None if value is None else _number(f"{section}.{key}", value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key}", value, "expected true/false")
            kwargs[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
                raise ConfigError(f"{section}.{key}", value, "expected an integer")
            kwargs[key] = int(value)
        else:
            kwargs[key] = _number(f"{section}.{key}", value)
    return cls(**kwargs)


def _number(name: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(name, value, "expected a number")
    return float(value)


def config_from_dict(data: Mapping | None) -> SimConfig:
    """Build a validated :class:`SimConfig`, filling defaults for absent keys."""
    data = dict(data or {})
    _check_keys("", data, ("seed", "sim", *_SECTIONS))
    kwargs: dict[str, Any] = {}
    if "seed" in data:
        seed = data["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed", seed, "must be an unsigned integer")
        kwargs["seed"] = seed
    sim = data.get("sim") or {}
    _check_keys("sim", sim, _SIM_KEYS)
    for key, value in sim.items():
        if key == "platoon_layout":
            if not isinstance(value, (list, tuple)):
                raise ConfigError("sim.platoon_layout", value, "expected a list")
            kwargs[key] = parse_layout(value)
        elif key in ("speed_bounds", "accel_bounds"):
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError(f"sim.{key}", value, "expected [lo, hi]")
            kwargs[key] = (_finite(f"sim.{key}", value[0]), _finite(f"sim.{key}", value[1]))
        elif key in ("action_repeat", "horizon_env_steps"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"sim.{key}", value, "expected an integer")
            kwargs[key] = value
        else:
            kwargs[key] = _number(f"sim.{key}", value)
    for name, cls in _SECTIONS.items():
        if name in data and data[name] is not None:
            kwargs[name] = _coerce(cls, name, data[name])
    return SimConfig(**kwargs)


def config_to_dict(cfg: SimConfig) -> dict:
    def plain(obj):
        if isinstance(obj, PiecewiseQuadratic):
            return {"breakpoints": list(obj.breakpoints), "coeffs": [list(r) for r in obj.coeffs]}
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    out: dict[str, Any] = {"seed": cfg.seed, "sim": {}}
    for key in _SIM_KEYS:
        value = getattr(cfg, key)
        out["sim"][key] = format_layout(value) if key == "platoon_layout" else plain(value)
    for name in _SECTIONS:
        out[name] = plain(getattr(cfg, name))
    return out


def dump_config(cfg: SimConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def _read_yaml(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), None, f"cannot parse: {exc}") from None


def apply_overrides(data: Mapping | None, overrides: Sequence[str]) -> dict:
    """Apply dotted ``key=value`` overrides (``idm.T=1.2``) to a raw config mapping.

    Values are parsed as YAML scalars, so ``true``, ``3`` and ``[0, 35]`` work.
    """
    out = _deepcopy(dict(data or {}))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(item, None, "override must look like section.key=value")
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(key, raw, "override path crosses a scalar")
        node[parts[-1]] = value
    return out


def _deepcopy(obj):
    if isinstance(obj, dict):
        return {k: _deepcopy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_deepcopy(v) for v in obj]
    return obj


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> SimConfig:
    """Load and validate a YAML config file; ``path=None`` gives all defaults."""
    data = _read_yaml(path) if path is not None else {}
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(str(path), data, "top level must be a mapping")
    return config_from_dict(apply_overrides(data, overrides))


def config_hash(cfg: SimConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]


PACKAGE_DIR = Path(__file__).resolve().parent
CONFIG_DIR = PACKAGE_DIR / "configs"
DATA_DIR = PACKAGE_DIR / "data"
