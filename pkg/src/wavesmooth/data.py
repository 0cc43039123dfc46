"""Leader trajectories: CSV ingestion, chunk sampling and synthetic waves."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavesmooth.core import DATA_DIR

log = logging.getLogger(__name__)

V_MAX_DATA = 40.0
MAX_SLEW = 3.0
CHUNK_SIZE = 500


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class LeaderTrajectory:
    """Uniformly sampled leader speed series."""

    id: str
    t: np.ndarray
    v: np.ndarray
    n_clipped: int = 0
    positions: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise TrajectoryError("t and v must be 1-D and the same length")
        if len(t) < 2:
            raise TrajectoryError(f"trajectory {self.id!r} needs at least 2 samples, got {len(t)}")
        steps = np.diff(t)
        if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-6:
            raise TrajectoryError(f"trajectory {self.id!r} is not uniformly sampled")
        if np.any(v < 0) or np.any(v > V_MAX_DATA) or not np.all(np.isfinite(v)):
            raise TrajectoryError(f"trajectory {self.id!r} has speeds outside [0, {V_MAX_DATA}]")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)
        # trapezoidal integration, x(0) = 0
        x = np.concatenate(([0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * self.dt)))
        object.__setattr__(self, "positions", x)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self):
        return len(self.v)


@dataclass(frozen=True)
class TrajectoryChunk:
    source_id: str
    start_index: int
    t: np.ndarray
    v: np.ndarray
    chunk_id: int

    def __len__(self):
        return len(self.v)


def load_trajectory(path: str | Path, traj_id: str | None = None) -> LeaderTrajectory:
    """Read a ``t,v`` CSV. Speeds outside [0, 40] are clipped and counted in ``n_clipped``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    ts, vs = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrajectoryError(f"{path}: empty file")
        if [h.strip() for h in header] != ["t", "v"]:
            raise TrajectoryError(f"{path}: expected header 't,v', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, v = (float(c) for c in row)
            except ValueError:
                raise TrajectoryError(f"{path}:{lineno}: cannot parse row {row!r}") from None
            ts.append(t)
            vs.append(v)
    if not ts:
        raise TrajectoryError(f"{path}: no samples")
    v = np.array(vs)
    n_clipped = int(np.sum((v < 0) | (v > V_MAX_DATA)))
    if n_clipped:
        log.warning("%s: clipped %d speed samples into [0, %g]", path, n_clipped, V_MAX_DATA)
    return LeaderTrajectory(traj_id or path.stem, np.array(ts), np.clip(v, 0.0, V_MAX_DATA), n_clipped)


def save_trajectory(traj: LeaderTrajectory, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write("t,v\n")
        for t, v in zip(traj.t, traj.v):
            fh.write(f"{t:.1f},{v:.10g}\n")


def chunk_id(source_id: str, start_index: int) -> int:
    """Injective code for (source, start) as long as source ids do not collide under CRC32."""
    if not 0 <= start_index < 1 << 24:
        raise ValueError("start index out of range")
    return (zlib.crc32(source_id.encode()) << 24) | start_index


def sample_chunk(traj: LeaderTrajectory, rng: np.random.Generator, size: int = CHUNK_SIZE) -> TrajectoryChunk:
    """Uniformly sample a contiguous chunk of ``size`` samples."""
    if len(traj) < size:
        raise TrajectoryError(f"trajectory {traj.id!r} has {len(traj)} samples, chunk needs {size}")
    start = int(rng.integers(0, len(traj) - size + 1))
    sl = slice(start, start + size)
    return TrajectoryChunk(traj.id, start, traj.t[sl], traj.v[sl], chunk_id(traj.id, start))


@dataclass(frozen=True)
class WaveSpec:
    """Recipe for a synthetic stop-and-go leader trajectory.

    Each wave decelerates from ``v_base`` to a trough, holds, then recovers.
    The deepest wave reaches ``v_min``; the others stop somewhere between
    ``v_min`` and ``v_base``.
    """

    duration: float
    v_base: float
    n_waves: int
    v_min: float
    dt: float = 0.1
    decel_range: tuple[float, float] = (1.0, 3.0)
    accel_range: tuple[float, float] = (0.5, 1.5)
    hold_range: tuple[float, float] = (2.0, 15.0)

    def __post_init__(self):
        if not 0 <= self.v_base <= 35:
            raise TrajectoryError(f"v_base must be in [0, 35], got {self.v_base}")
        if self.v_min < 0 or self.v_min > self.v_base:
            raise TrajectoryError(f"v_min must be in [0, v_base], got {self.v_min}")
        if self.n_waves < 0 or self.duration <= 0:
            raise TrajectoryError("need n_waves >= 0 and duration > 0")
        for lo, hi in (self.decel_range, self.accel_range):
            if not 0 < lo <= hi <= MAX_SLEW:
                raise TrajectoryError(f"rates must satisfy 0 < lo <= hi <= {MAX_SLEW}")


def generate_synthetic_wave(spec: WaveSpec, rng: np.random.Generator, traj_id: str = "synthetic") -> LeaderTrajectory:
    """Piecewise-linear speed series of trapezoidal wave episodes."""
    n = int(round(spec.duration / spec.dt))
    t = np.arange(n) * spec.dt
    v = np.full(n, float(spec.v_base))
    if spec.n_waves == 0 or spec.v_base == spec.v_min:
        return LeaderTrajectory(traj_id, t, v)
    slot = spec.duration / spec.n_waves
    drop_max = spec.v_base - spec.v_min
    # fastest possible episode: both ramps at MAX_SLEW, no hold, one sample of margin
    if 2 * drop_max / MAX_SLEW + 2 * spec.dt > slot:
        raise TrajectoryError(
            f"infeasible: a {drop_max:.1f} m/s wave needs {2 * drop_max / MAX_SLEW:.1f} s but slots are {slot:.1f} s")
    deepest = int(rng.integers(spec.n_waves))
    for w in range(spec.n_waves):
        trough = spec.v_min if w == deepest else rng.uniform(spec.v_min, spec.v_min + 0.7 * drop_max)
        drop = spec.v_base - trough
        dec = rng.uniform(*spec.decel_range)
        acc = rng.uniform(*spec.accel_range)
        hold = rng.uniform(*spec.hold_range)
        length = drop / dec + hold + drop / acc
        budget = slot - 2 * spec.dt
        if length > budget:
            # squeeze: drop the hold first, then speed the ramps up to the slew limit
            hold = max(0.0, hold - (length - budget))
            ramp_time = budget - hold
            if drop / dec + drop / acc > ramp_time:
                scale = (drop / dec + drop / acc) / ramp_time
                dec, acc = min(MAX_SLEW, dec * scale), min(MAX_SLEW, acc * scale)
            length = drop / dec + hold + drop / acc
        t0 = w * slot + spec.dt + rng.uniform(0.0, max(0.0, slot - 2 * spec.dt - length))
        t1 = t0 + drop / dec
        t2 = t1 + hold
        t3 = t2 + drop / acc
        ep = (t >= t0) & (t <= t3)
        tt = t[ep]
        shape = np.where(tt < t1, spec.v_base - dec * (tt - t0),
                         np.where(tt <= t2, trough, trough + acc * (tt - t2)))
        v[ep] = np.minimum(v[ep], np.clip(shape, trough, spec.v_base))
    return LeaderTrajectory(traj_id, t, v)


# committed synthetic datasets: 4 training and 6 evaluation trajectories
DATASET_SPECS: dict[str, tuple[WaveSpec, int]] = {
    "train_1": (WaveSpec(duration=800.0, v_base=28.0, n_waves=4, v_min=3.0), 101),
    "train_2": (WaveSpec(duration=1000.0, v_base=30.0, n_waves=6, v_min=5.0), 102),
    "train_3": (WaveSpec(duration=600.0, v_base=25.0, n_waves=3, v_min=1.0), 103),
    "train_4": (WaveSpec(duration=1200.0, v_base=27.0, n_waves=8, v_min=8.0), 104),
    "eval_1": (WaveSpec(duration=600.0, v_base=30.0, n_waves=2, v_min=25.0), 201),
    "eval_2": (WaveSpec(duration=700.0, v_base=29.0, n_waves=3, v_min=15.0), 202),
    "eval_3": (WaveSpec(duration=800.0, v_base=28.0, n_waves=4, v_min=10.0), 203),
    "eval_4": (WaveSpec(duration=800.0, v_base=27.0, n_waves=5, v_min=6.0), 204),
    "eval_5": (WaveSpec(duration=900.0, v_base=27.0, n_waves=6, v_min=3.0), 205),
    "eval_6": (WaveSpec(duration=1000.0, v_base=28.0, n_waves=8, v_min=1.0), 206),
}


def generate_dataset(out_dir: str | Path) -> list[Path]:
    """Write every committed synthetic trajectory as ``<id>.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    paths = []
    for name, (spec, seed) in DATASET_SPECS.items():
        traj = generate_synthetic_wave(spec, np.random.default_rng(seed), name)
        path = out_dir / f"{name}.csv"
        save_trajectory(traj, path)
        paths.append(path)
    return paths


def resolve_trajectory(ref: str | Path) -> LeaderTrajectory:
    """Load a trajectory by file path or by committed dataset id (``eval_6``)."""
    path = Path(ref)
    if path.suffix == ".csv" or path.exists():
        return load_trajectory(path)
    candidate = DATA_DIR / f"{ref}.csv"
    if candidate.is_file():
        return load_trajectory(candidate, str(ref))
    raise FileNotFoundError(f"no trajectory file or dataset id {ref!r}")


def is_valid_speed_series(v: np.ndarray, dt: float) -> bool:
    return bool(len(v) >= 2 and np.all((v >= 0) & (v <= V_MAX_DATA))
                and np.max(np.abs(np.diff(v))) / dt <= MAX_SLEW + 1e-9 and math.isfinite(float(v.sum())))
