"""AV controller stack: observations, Gaussian MLP policy, safety wrappers.

Observation layout (14 scalars, each mapped to [-1, 1])::

    0 v_av   1 v_lead   2 h   3 h_min   4 h_max
    5..9 ego speed history, oldest first
    10 v_sp(x)   11 v_sp(x+200)   12 v_sp(x+500)   13 v_sp(x+1000)

Speeds use ``2 v / 35 - 1`` and gaps ``2 min(h, 250) / 250 - 1``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from wavesmooth import kernels
from wavesmooth.kernels import BRANCH_NAMES, FAILSAFE, GAP_CLOSE, PASS_THROUGH

OBS_DIM = 14
AUG_DIM = 20
HISTORY = 5
V_SCALE = 35.0
GAP_CAP = 250.0
PHANTOM_GAP = 250.0
PHANTOM_SPEED = 35.0
TTC_LIMIT = 6.0
H_MAX_FLOOR = 120.0

# squashed action a = ACTION_MID + ACTION_HALF * tanh(u) spans [-3, 1.5]
ACTION_LO, ACTION_HI = -3.0, 1.5
ACTION_MID = 0.5 * (ACTION_LO + ACTION_HI)
ACTION_HALF = 0.5 * (ACTION_HI - ACTION_LO)

__all__ = [
    "Observation", "WrapperDecision", "PolicyParameters", "PolicyError", "build_observation", "v_diff", "ttc",
    "wrap_action", "act", "warmup_gate", "save_checkpoint", "load_checkpoint", "export_text",
    "FAILSAFE", "GAP_CLOSE", "PASS_THROUGH", "BRANCH_NAMES",
]


class PolicyError(RuntimeError):
    def __init__(self, layer: int, msg: str = "non-finite activation"):
        self.layer = layer
        super().__init__(f"{msg} in layer {layer}")


# --------------------------------------------------------------------------- #
# wrappers


def v_diff(v_av, v_lead):
    """Exaggerated closing speed used by the failsafe."""
    return v_av + 4.0 * v_av / 30.0 + 1.0 - v_lead


def ttc(h, vd):
    """Time to collision: ``h / v_diff`` while closing, else infinity."""
    vd = np.asarray(vd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(vd > 0, np.asarray(h, dtype=float) / np.where(vd > 0, vd, 1.0), np.inf)
    return out[()] if out.ndim == 0 else out


def gap_thresholds(v_av, v_lead):
    """``(h_min, h_max)``; h_min is 0 while not closing."""
    vd = v_diff(v_av, v_lead)
    return np.where(vd > 0, TTC_LIMIT * vd, 0.0), np.maximum(H_MAX_FLOOR, TTC_LIMIT * np.asarray(v_av, dtype=float))


@dataclass(frozen=True)
class WrapperDecision:
    raw_action: float
    ttc: float
    h_min: float
    h_max: float
    branch: int
    applied_accel: float

    @property
    def branch_name(self) -> str:
        return BRANCH_NAMES[self.branch]


def wrap_batch(raw, v_av, v_lead, h, dt, accel_bounds=(ACTION_LO, ACTION_HI), speed_bounds=(0.0, 35.0)):
    """Vectorised wrapper. Returns ``(applied, branch, ttc, h_min, h_max)`` arrays."""
    raw, v_av, v_lead, h = (np.ascontiguousarray(np.atleast_1d(a), dtype=float) for a in (raw, v_av, v_lead, h))
    n = len(raw)
    applied, h_min, h_max = np.empty(n), np.empty(n), np.empty(n)
    branch = np.empty(n, dtype=np.int_)
    t = kernels.wrap(raw, v_av, v_lead, h, dt, accel_bounds[0], accel_bounds[1], speed_bounds[0], speed_bounds[1],
                     applied, branch, h_min, h_max)
    return applied, branch, np.asarray(t), h_min, h_max


def wrap_action(raw: float, v_av: float, v_lead: float, h: float, dt: float = 0.1,
                accel_bounds=(ACTION_LO, ACTION_HI), speed_bounds=(0.0, 35.0)) -> WrapperDecision:
    """Failsafe, then gap closing, then the speed-bound clip."""
    applied, branch, t, h_min, h_max = wrap_batch(raw, v_av, v_lead, h, dt, accel_bounds, speed_bounds)
    return WrapperDecision(float(raw), float(t[0]), float(h_min[0]), float(h_max[0]), int(branch[0]),
                           float(applied[0]))


def warmup_gate(position: float, idm_accel: float, controller_accel: float) -> float:
    """AVs drive like humans until they cross x = 0."""
    return idm_accel if position < 0 else controller_accel


# --------------------------------------------------------------------------- #
# observations


def scale_speed(v):
    return np.clip(2.0 * np.asarray(v, dtype=float) / V_SCALE - 1.0, -1.0, 1.0)


def scale_gap(h):
    return np.clip(2.0 * np.minimum(np.asarray(h, dtype=float), GAP_CAP) / GAP_CAP - 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class Observation:
    v_av: float
    v_lead: float
    h: float
    h_min: float
    h_max: float
    speed_history: tuple[float, ...]
    v_sp: tuple[float, float, float, float]

    def vector(self) -> np.ndarray:
        return build_obs_batch(np.array([self.v_av]), np.array([self.v_lead]), np.array([self.h]),
                               np.array([self.speed_history]), np.array([self.v_sp]))[0]


def build_observation(v_av: float, history: Sequence[float], v_lead: float | None = None, h: float | None = None,
                      v_sp: Sequence[float] | None = None) -> Observation:
    """Observation for one AV.

    ``history`` holds at least the last 5 ego speeds (most recent last).
    A missing leader becomes a phantom 250 m ahead at 35 m/s. Without a
    profile the four planner entries fall back to the ego speed.
    """
    if len(history) < HISTORY:
        raise ValueError(f"speed history needs {HISTORY} samples, got {len(history)}")
    if v_lead is None or h is None:
        v_lead, h = PHANTOM_SPEED, PHANTOM_GAP
    h_min, h_max = gap_thresholds(v_av, v_lead)
    sp = (v_av,) * 4 if v_sp is None else tuple(float(s) for s in v_sp)
    return Observation(float(v_av), float(v_lead), float(h), float(h_min), float(h_max),
                       tuple(float(s) for s in history[-HISTORY:]), sp)


def build_obs_batch(v_av, v_lead, h, history, v_sp) -> np.ndarray:
    """Scaled observations, shape (B, 14). ``history`` is (B, 5), ``v_sp`` is (B, 4)."""
    h_min, h_max = gap_thresholds(v_av, v_lead)
    out = np.empty((len(v_av), OBS_DIM))
    out[:, 0] = scale_speed(v_av)
    out[:, 1] = scale_speed(v_lead)
    out[:, 2] = scale_gap(h)
    out[:, 3] = scale_gap(h_min)
    out[:, 4] = scale_gap(h_max)
    out[:, 5:10] = scale_speed(history)
    out[:, 10:14] = scale_speed(v_sp)
    return out


# --------------------------------------------------------------------------- #
# policy


Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class PolicyParameters:
    """Actor and value MLPs. Weights are stored (in, out) so a layer is ``x @ W + b``."""

    actor: list[Layer]
    log_std: float
    value: list[Layer]

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: Sequence[int] = (64, 64, 64, 64), log_std: float = 0.0,
             obs_dim: int = OBS_DIM, aug_dim: int = AUG_DIM) -> PolicyParameters:
        actor = _init_mlp(rng, [obs_dim, *hidden, 1], 0.01)
        # start from a neutral policy: mean action of zero acceleration rather than the interval midpoint
        actor[-1][1][:] = unsquash(0.0)
        return cls(actor, float(log_std), _init_mlp(rng, [aug_dim, *hidden, 1], 1.0))

    @classmethod
    def zeros(cls, hidden: Sequence[int] = (64, 64, 64, 64), log_std: float = 0.0) -> PolicyParameters:
        def z(dims):
            return [(np.zeros((i, o)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])]
        return cls(z([OBS_DIM, *hidden, 1]), float(log_std), z([AUG_DIM, *hidden, 1]))

    def copy(self) -> PolicyParameters:
        return PolicyParameters([(w.copy(), b.copy()) for w, b in self.actor], self.log_std,
                                [(w.copy(), b.copy()) for w, b in self.value])

    def flat(self) -> np.ndarray:
        parts = [a.ravel() for layer in self.actor for a in layer] + [np.array([self.log_std])]
        parts += [a.ravel() for layer in self.value for a in layer]
        return np.concatenate(parts)

    def dims(self, which: str = "actor") -> list[int]:
        layers = self.actor if which == "actor" else self.value
        return [layers[0][0].shape[0]] + [w.shape[1] for w, _ in layers]

    def equal(self, other: PolicyParameters) -> bool:
        return np.array_equal(self.flat(), other.flat()) and self.dims() == other.dims() \
            and self.dims("value") == other.dims("value")


def _init_mlp(rng, dims, out_gain):
    layers = []
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        gain = out_gain if k == len(dims) - 2 else 1.0
        layers.append((rng.normal(0.0, gain / math.sqrt(i), (i, o)), np.zeros(o)))
    return layers


def mlp_forward(layers: Sequence[Layer], x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Tanh hidden layers with a linear head. Appends each layer input to ``cache``."""
    h = np.asarray(x, dtype=float)
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        if cache is not None:
            cache.append(h)
        z = h @ w + b
        h = z if k == last else np.tanh(z)
        if not np.all(np.isfinite(h)):
            raise PolicyError(k)
    return h


def squash(u):
    return ACTION_MID + ACTION_HALF * np.tanh(u)


def unsquash(a):
    return np.arctanh(np.clip((np.asarray(a, dtype=float) - ACTION_MID) / ACTION_HALF, -1 + 1e-12, 1 - 1e-12))


def log_prob(u, mean, log_std):
    """Log-density of the squashed action given its pre-squash value ``u``."""
    std = math.exp(log_std)
    gauss = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    return gauss - np.log(ACTION_HALF * (1.0 - np.tanh(u) ** 2) + 1e-12)


def gaussian_entropy(log_std: float) -> float:
    return 0.5 + 0.5 * math.log(2 * math.pi) + log_std


def act_batch(params: PolicyParameters, obs: np.ndarray, stochastic: bool, rng: np.random.Generator | None = None):
    """Returns ``(action, u, mean)`` for a (B, 14) observation batch."""
    mean = mlp_forward(params.actor, obs)[:, 0]
    if stochastic:
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        u = mean + math.exp(params.log_std) * rng.standard_normal(len(mean))
    else:
        u = mean
    return squash(u), u, mean


def act(params: PolicyParameters, obs, mode: str = "deterministic", rng: np.random.Generator | None = None) -> float:
    """Raw acceleration in [-3, 1.5] before the wrappers."""
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown mode {mode!r}")
    x = obs.vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=float)
    a, _, _ = act_batch(params, x.reshape(1, -1), mode == "stochastic", rng)
    return float(a[0])


def value_batch(params: PolicyParameters, aug: np.ndarray) -> np.ndarray:
    return mlp_forward(params.value, aug)[:, 0]


# --------------------------------------------------------------------------- #
# checkpoints
#
# little-endian layout, see docs/checkpoint_format.md:
#   8s magic b"WSPOLCY1" | u32 n_actor_dims | u32 * dims | u32 n_value_dims | u32 * dims
#   f64 log_std | actor blocks | value blocks
# each block is W (in x out, row-major f64) followed by b (out f64)

MAGIC = b"WSPOLCY1"


def save_checkpoint(params: PolicyParameters, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    da, dv = params.dims("actor"), params.dims("value")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(f"<I{len(da)}I", len(da), *da))
        fh.write(struct.pack(f"<I{len(dv)}I", len(dv), *dv))
        fh.write(struct.pack("<d", params.log_std))
        for w, b in params.actor + params.value:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> PolicyParameters:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint (bad magic)")
    off = 8

    def u32s(n):
        nonlocal off
        out = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        return list(out)

    da = u32s(u32s(1)[0])
    dv = u32s(u32s(1)[0])
    (log_std,) = struct.unpack_from("<d", data, off)
    off += 8

    def blocks(dims):
        nonlocal off
        layers = []
        for i, o in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(data, "<f8", i * o, off).reshape(i, o).astype(float)
            off += 8 * i * o
            b = np.frombuffer(data, "<f8", o, off).astype(float)
            off += 8 * o
            layers.append((w, b))
        return layers

    try:
        actor, value = blocks(da), blocks(dv)
    except ValueError:
        raise ValueError(f"{path}: truncated checkpoint") from None
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    if da[0] != OBS_DIM or da[-1] != 1 or dv[0] != AUG_DIM or dv[-1] != 1:
        raise ValueError(f"{path}: layer dims {da} / {dv} do not match the observation layout")
    return PolicyParameters(actor, float(log_std), value)


def export_text(params: PolicyParameters, path: str | Path) -> None:
    """Human-readable dump of every weight, for auditing checkpoints."""
    with Path(path).open("w") as fh:
        fh.write(f"log_std {params.log_std!r}\n")
        for name, layers in (("actor", params.actor), ("value", params.value)):
            for k, (w, b) in enumerate(layers):
                fh.write(f"{name}.{k}.W {w.shape[0]} {w.shape[1]}\n")
                for row in w:
                    fh.write(" ".join(repr(float(x)) for x in row) + "\n")
                fh.write(f"{name}.{k}.b {b.shape[0]}\n")
                fh.write(" ".join(repr(float(x)) for x in b) + "\n")
