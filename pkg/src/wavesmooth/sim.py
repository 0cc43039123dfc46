"""Episode and evaluation orchestration.

Update order within one simulation step:

1. leader speed from the replayed trajectory
2. AV decisions (every ``action_repeat`` steps, held in between and
   re-wrapped every step) and human IDM accelerations, all from the
   pre-step snapshot
3. lane-change events, when enabled
4. integration
5. metric accumulation
"""
from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from wavesmooth import kernels
from wavesmooth.control import (HISTORY, PolicyParameters, act_batch, build_obs_batch, load_checkpoint, wrap_batch)
from wavesmooth.core import MILE, ConfigError, SimConfig, VehicleKind
from wavesmooth.data import LeaderTrajectory, resolve_trajectory
from wavesmooth.dynamics import CollisionError, Platoon, equilibrium_gap
from wavesmooth.energy import FuelModel, RunDescriptor, mpg_improvement, platoon_flow, system_mpg
from wavesmooth.lanechange import LaneChangeEvent, apply_lane_changes
from wavesmooth.planner import ProfileSchedule

log = logging.getLogger(__name__)

WARMUP = 3  # gap-trace branch code for AVs not under control (warm-up or IDM stub)
METRICS_HEADER = ("run_id", "traj_id", "penetration", "lc_enabled", "system_mpg", "mpg_improvement_pct",
                  "throughput_vph", "collisions")
BUILTIN_CONTROLLERS = ("idm", "reference")


@dataclass(frozen=True)
class RunSpec:
    """One simulation run.

    ``controller`` is ``"idm"`` (AVs drive like humans), ``"reference"``
    (the scripted gap-buffer smoother) or a path to a policy checkpoint.
    ``platoon_size`` counts the vehicles behind the trajectory leader.
    """

    trajectory: str
    platoon_size: int = 200
    penetration: float = 0.04
    lc_enabled: bool = False
    planner_enabled: bool = True
    controller: str = "idm"
    seed: int = 0
    warmup: bool = True
    start_index: int = 0
    max_steps: int | None = None
    record_tsd: bool = True
    tsd_stride: int = 1

    def __post_init__(self):
        if not 0.0 <= self.penetration <= 1.0:
            raise ConfigError("penetration", self.penetration, "must be in [0, 1]")
        if not isinstance(self.platoon_size, int) or self.platoon_size < 1:
            raise ConfigError("platoon_size", self.platoon_size, "need at least one vehicle behind the leader")
        if self.seed < 0:
            raise ConfigError("seed", self.seed, "must be an unsigned integer")
        if self.tsd_stride < 1:
            raise ConfigError("tsd_stride", self.tsd_stride, "must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps", self.max_steps, "must be >= 1")

    @property
    def av_spacing(self) -> int | None:
        return None if self.penetration == 0 else max(1, round(1.0 / self.penetration))

    def descriptor(self) -> RunDescriptor:
        return RunDescriptor(self.trajectory, self.platoon_size, self.seed, self.lc_enabled)

    def baseline(self) -> RunSpec:
        """The all-human run this spec is compared against."""
        return RunSpec(**{**asdict(self), "penetration": 0.0, "controller": "idm"})

    @property
    def run_id(self) -> str:
        ctrl = Path(self.controller).stem if self.controller not in BUILTIN_CONTROLLERS else self.controller
        return (f"{self.trajectory}-n{self.platoon_size}-p{self.penetration:g}-{ctrl}"
                f"-lc{int(self.lc_enabled)}-pl{int(self.planner_enabled)}-s{self.seed}")

    @classmethod
    def from_dict(cls, d: dict) -> RunSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], d[unknown[0]], "unknown run spec key")
        if "trajectory" not in d:
            raise ConfigError("trajectory", None, "required")
        return cls(**d)


def load_spec(path: str | Path) -> RunSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"run spec not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("spec", data, "top level must be a mapping")
    return RunSpec.from_dict(data)


def av_layout(platoon_size: int, penetration: float) -> np.ndarray:
    """Vehicle kinds for the leader (index 0) and ``platoon_size`` followers.

    With s = round(1 / penetration), AVs sit at indices s, 2s, ... so every
    AV closes a block of s vehicles: 8 AVs among 200 followers at 4%.
    """
    kinds = np.full(platoon_size + 1, int(VehicleKind.HUMAN), dtype=np.int8)
    kinds[0] = int(VehicleKind.LEADER)
    if penetration > 0:
        s = max(1, round(1.0 / penetration))
        kinds[s::s] = int(VehicleKind.AV)
    return kinds


# --------------------------------------------------------------------------- #
# controllers


@dataclass
class DecisionInput:
    ids: np.ndarray
    v_av: np.ndarray
    v_lead: np.ndarray
    h: np.ndarray
    history: np.ndarray   # (n, 5)
    v_sp: np.ndarray      # (n, 4)
    dt_decision: float


class IdmStub:
    """AVs follow the human model; the wrappers stay off."""

    wrapped = False

    def decide(self, d: DecisionInput) -> np.ndarray:  # pragma: no cover - never called
        raise NotImplementedError


class ReferenceController:
    """Scripted gap-buffer smoother.

    Tracks ``min(leader speed EMA, planner target)`` and regulates the gap
    proportionally toward ``0.8 h_max``; the output goes through the same
    wrappers as a learned policy.
    """

    wrapped = True

    def __init__(self, tau: float = 180.0, k_v: float = 0.2, k_h: float = 0.02, gap_fraction: float = 0.8,
                 use_planner: bool = True):
        self.tau, self.k_v, self.k_h, self.gap_fraction = tau, k_v, k_h, gap_fraction
        self.use_planner = use_planner
        self.ema: dict[int, float] = {}

    def decide(self, d: DecisionInput) -> np.ndarray:
        alpha = min(1.0, d.dt_decision / self.tau)
        ema = np.array([self.ema.get(int(i), float(v)) for i, v in zip(d.ids, d.v_lead)])
        ema += alpha * (d.v_lead - ema)
        for i, e in zip(d.ids, ema):
            self.ema[int(i)] = float(e)
        target = np.minimum(ema, d.v_sp[:, 0]) if self.use_planner else ema
        h_max = np.maximum(120.0, 6.0 * d.v_av)
        v_des = target + self.k_h * (d.h - self.gap_fraction * h_max)
        return np.clip(self.k_v * (v_des - d.v_av), -3.0, 1.5)


class PolicyController:
    wrapped = True

    def __init__(self, params: PolicyParameters):
        self.params = params

    def decide(self, d: DecisionInput) -> np.ndarray:
        obs = build_obs_batch(d.v_av, d.v_lead, d.h, d.history, d.v_sp)
        return act_batch(self.params, obs, False)[0]


def make_controller(name: str, planner_enabled: bool = True):
    if name == "idm":
        return IdmStub()
    if name == "reference":
        return ReferenceController(use_planner=planner_enabled)
    path = Path(name)
    if not path.is_file():
        raise FileNotFoundError(f"policy checkpoint not found: {path}")
    return PolicyController(load_checkpoint(path))


# --------------------------------------------------------------------------- #
# records


@dataclass
class GapTrace:
    t: list = field(default_factory=list)
    h: list = field(default_factory=list)
    h_min: list = field(default_factory=list)
    h_max: list = field(default_factory=list)
    branch: list = field(default_factory=list)
    v_av: list = field(default_factory=list)
    v_lead: list = field(default_factory=list)
    raw: list = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in asdict(self).items()}


@dataclass
class TimeSpace:
    """Flat time-space records: the state at the start of every recorded step."""

    ids: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class RunMetrics:
    run_id: str
    traj_id: str
    penetration: float
    lc_enabled: bool
    seed: int
    system_mpg: float
    throughput_vph: float
    collisions: int
    distances: dict[int, float]
    fuel: dict[int, float]
    last_follower_speed_std: float
    branch_counts: dict[str, int]
    n_lane_changes: int
    steps: int
    descriptor: RunDescriptor
    fault: str | None = None


@dataclass
class EpisodeResult:
    metrics: RunMetrics
    tsd: TimeSpace | None
    gap_traces: dict[int, GapTrace]
    events: list[LaneChangeEvent]
    fuel_steps: np.ndarray | None = None  # (steps,) total fuel per step, for bookkeeping checks


class _Accumulator:
    """Per-vehicle sums indexed by vehicle id, growing as lane changes add vehicles."""

    def __init__(self, n: int):
        self.data = np.zeros(max(16, 2 * n))

    def add(self, ids: np.ndarray, values: np.ndarray):
        if ids.max() >= len(self.data):
            grown = np.zeros(2 * int(ids.max()) + 2)
            grown[:len(self.data)] = self.data
            self.data = grown
        np.add.at(self.data, ids, values)


def run_episode(spec: RunSpec, cfg: SimConfig | None = None, traj: LeaderTrajectory | None = None,
                controller=None, keep_fuel_steps: bool = False) -> EpisodeResult:
    """Simulate one platoon behind a replayed trajectory.

    Raises :class:`CollisionError` when any gap closes.
    """
    cfg = cfg or SimConfig()
    traj = traj or resolve_trajectory(spec.trajectory)
    controller = controller or make_controller(spec.controller, spec.planner_enabled)
    dt, L, p = cfg.dt, cfg.vehicle_length, cfg.idm
    a_lo, a_hi = cfg.accel_bounds
    v_lo, v_hi = cfg.speed_bounds
    fuel_model = FuelModel(cfg.energy)
    rng = np.random.default_rng(spec.seed)

    start = spec.start_index
    avail = len(traj) - 1 - start
    if avail < 1:
        raise ConfigError("start_index", start, f"trajectory {traj.id!r} has {len(traj)} samples")
    steps = avail if spec.max_steps is None else min(avail, spec.max_steps)
    lead_v = traj.v[start:start + steps + 1]

    kinds = av_layout(spec.platoon_size, spec.penetration)
    n = len(kinds)
    v0 = float(lead_v[0])
    s_e = equilibrium_gap(p, min(v0, 0.999 * p.v0))
    x0 = (1 - np.arange(n)) * (s_e + L)  # first follower at x = 0
    pl = Platoon(np.arange(n, dtype=np.int64), kinds.copy(), x0.astype(float), np.full(n, v0), np.zeros(n), L)
    lead_x = x0[0] + np.concatenate(([0.0], np.cumsum(0.5 * (lead_v[1:] + lead_v[:-1]) * dt)))
    offset = traj.positions[start] - x0[0]
    schedule = ProfileSchedule(traj, cfg.planner) if spec.planner_enabled else None
    t0 = float(traj.t[start])

    av_ids = pl.ids[kinds == int(VehicleKind.AV)]
    history = {int(i): [v0] * HISTORY for i in av_ids}
    raw_held = {int(i): 0.0 for i in av_ids}
    traces = {int(i): GapTrace() for i in av_ids}
    branch_counts = {"Failsafe": 0, "GapClose": 0, "PassThrough": 0, "Warmup": 0}
    dist = _Accumulator(n)
    fuel = _Accumulator(n)
    fuel_steps = np.zeros(steps) if keep_fuel_steps else None
    last_id = int(pl.ids[-1])
    last_speeds = np.empty(steps + 1)
    last_speeds[0] = v0
    x_tp = lead_x[0] + 0.5 * (lead_x[-1] - lead_x[0])
    crossings: dict[int, float] = {}
    events: list[LaneChangeEvent] = []
    tsd_chunks: list[tuple] = []

    for k in range(steps):
        t = t0 + k * dt
        if spec.record_tsd and k % spec.tsd_stride == 0:
            tsd_chunks.append((pl.ids.copy(), np.full(len(pl), t), pl.x.copy(), pl.v.copy()))
        # (2) accelerations from the pre-step snapshot
        x2, v2 = pl.x[None, :], pl.v[None, :]
        gaps = kernels.compute_gaps(x2, L, np.empty_like(x2))
        acc = np.zeros_like(x2)
        mask = np.ones(x2.shape, dtype=bool)
        mask[0, 0] = False
        kernels.idm_fill(v2, gaps, mask, p.v0, p.T, p.s0, p.a_max, p.b, p.delta, a_lo, acc)
        acc = acc[0]
        av_idx = np.flatnonzero(pl.kinds == int(VehicleKind.AV))
        if len(av_idx):
            ids = pl.ids[av_idx]
            v_av, v_lead, h = pl.v[av_idx], pl.v[av_idx - 1], gaps[0, av_idx]
            active = pl.x[av_idx] >= 0 if spec.warmup else np.ones(len(av_idx), dtype=bool)
            if not controller.wrapped:
                active[:] = False
            if k % cfg.action_repeat == 0 and active.any():
                sel = np.flatnonzero(active)
                if schedule is not None:
                    v_sp = schedule.at(t).query_downstream(pl.x[av_idx[sel]] + offset)
                else:
                    v_sp = np.repeat(v_av[sel, None], 4, axis=1)
                d = DecisionInput(ids[sel], v_av[sel], v_lead[sel], h[sel],
                                  np.array([history[int(i)] for i in ids[sel]]), v_sp, cfg.action_repeat * dt)
                for i, r in zip(ids[sel], controller.decide(d)):
                    raw_held[int(i)] = float(r)
            raw = np.array([raw_held[int(i)] for i in ids])
            applied, branch, _, h_min, h_max = wrap_batch(raw, v_av, v_lead, h, dt, (a_lo, a_hi), (v_lo, v_hi))
            acc[av_idx] = np.where(active, applied, acc[av_idx])
            for j, i in enumerate(ids):
                tr = traces[int(i)]
                b = int(branch[j]) if active[j] else WARMUP
                tr.t.append(t), tr.h.append(float(h[j])), tr.h_min.append(float(h_min[j]))
                tr.h_max.append(float(h_max[j])), tr.branch.append(b), tr.v_av.append(float(v_av[j]))
                tr.v_lead.append(float(v_lead[j])), tr.raw.append(float(raw[j]))
                branch_counts[kernels.BRANCH_NAMES.get(b, "Warmup")] += 1
        pl.a = acc
        # (3) lane changes
        if spec.lc_enabled:
            events.extend(apply_lane_changes(pl, cfg.lanechange, rng, k))
        # (4) integration
        x_pre = pl.x.copy()
        v_pre = pl.v.copy()
        x2, v2 = pl.x[None, :].copy(), pl.v[None, :].copy()
        a_eff = np.empty_like(x2)
        gmin, _, c = kernels.advance(x2, v2, np.ascontiguousarray(pl.a[None, :]), np.array([lead_x[k + 1]]),
                                     np.array([lead_v[k + 1]]), dt, v_lo, v_hi, L, a_eff)
        if gmin <= 0:
            raise CollisionError(int(pl.ids[c]), int(pl.ids[c - 1]), k, gmin)
        pl.x, pl.v, pl.a = x2[0], v2[0], a_eff[0]
        # (5) metrics
        f = fuel_model(v_pre[1:], pl.a[1:]) * dt
        fuel.add(pl.ids[1:], f)
        dist.add(pl.ids[1:], pl.x[1:] - x_pre[1:])
        if fuel_steps is not None:
            fuel_steps[k] = f.sum()
        for i in av_ids:
            hist = history[int(i)]
            hist.pop(0)
            hist.append(float(v_pre[pl.ids == i][0]))
        hit = np.flatnonzero((x_pre[1:] < x_tp) & (pl.x[1:] >= x_tp)) + 1
        for j in hit:
            crossings.setdefault(int(pl.ids[j]), t + dt * (x_tp - x_pre[j]) / (pl.x[j] - x_pre[j]))
        last_speeds[k + 1] = pl.v[pl.ids == last_id][0]

    followers = np.arange(1, pl.next_id)
    distances = {int(i): float(dist.data[i]) for i in followers}
    fuels = {int(i): float(fuel.data[i]) for i in followers}
    metrics = RunMetrics(
        run_id=spec.run_id, traj_id=traj.id, penetration=spec.penetration, lc_enabled=spec.lc_enabled,
        seed=spec.seed, system_mpg=system_mpg(list(distances.values()), list(fuels.values())),
        throughput_vph=float(platoon_flow(list(crossings.values()))), collisions=0, distances=distances, fuel=fuels,
        last_follower_speed_std=float(np.std(last_speeds)), branch_counts=branch_counts,
        n_lane_changes=sum(1 for e in events if e.event != "suppressed"), steps=steps,
        descriptor=spec.descriptor())
    tsd = None
    if spec.record_tsd:
        tsd = TimeSpace(*(np.concatenate(c) for c in zip(*tsd_chunks)))
    return EpisodeResult(metrics, tsd, traces, events, fuel_steps)


# --------------------------------------------------------------------------- #
# evaluation


@dataclass
class Comparison:
    spec: RunSpec
    controlled: RunMetrics
    baseline: RunMetrics
    mpg_improvement_pct: float
    throughput_delta_pct: float


def _run_metrics(spec: RunSpec, cfg: SimConfig) -> RunMetrics:
    spec = RunSpec(**{**asdict(spec), "record_tsd": False})
    try:
        return run_episode(spec, cfg).metrics
    except CollisionError as err:
        log.error("%s: %s", spec.run_id, err)
        return RunMetrics(spec.run_id, spec.trajectory, spec.penetration, spec.lc_enabled, spec.seed, math.nan,
                          math.nan, 1, {}, {}, math.nan, {}, 0, err.step, spec.descriptor(), str(err))


def evaluate_matrix(specs: Sequence[RunSpec], cfg: SimConfig | None = None, jobs: int = 1) -> list[Comparison]:
    """Run every spec and its all-human baseline; baselines are shared between specs that match."""
    cfg = cfg or SimConfig()
    baselines: dict[RunDescriptor, RunSpec] = {}
    for s in specs:
        baselines.setdefault(s.descriptor(), s.baseline())
    todo = list(baselines.values()) + list(specs)
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_metrics, todo, [cfg] * len(todo)))
    else:
        results = [_run_metrics(s, cfg) for s in todo]
    base = {d: m for d, m in zip(baselines, results[:len(baselines)])}
    out = []
    for s, m in zip(specs, results[len(baselines):]):
        b = base.get(s.descriptor())
        if b is None:
            raise ValueError(f"no baseline for {s.run_id}")
        imp = mpg_improvement({"system_mpg": m.system_mpg, "descriptor": m.descriptor},
                              {"system_mpg": b.system_mpg, "descriptor": b.descriptor})
        dtp = 100.0 * (m.throughput_vph / b.throughput_vph - 1.0) if b.throughput_vph else math.nan
        out.append(Comparison(s, m, b, imp, dtp))
    return out


def summarize(comparisons: Sequence[Comparison]) -> list[dict]:
    """Mean and standard deviation over seeds of each (trajectory, penetration, lc, controller) cell."""
    cells: dict[tuple, list[Comparison]] = {}
    for c in comparisons:
        s = c.spec
        cells.setdefault((s.trajectory, s.penetration, s.lc_enabled, s.planner_enabled, s.controller), []).append(c)
    rows = []
    for (traj, pen, lc, planner, ctrl), cs in cells.items():
        imp = np.array([c.mpg_improvement_pct for c in cs])
        tp = np.array([c.throughput_delta_pct for c in cs])
        rows.append(dict(traj_id=traj, penetration=pen, lc_enabled=lc, planner_enabled=planner, controller=ctrl,
                         n_seeds=len(cs), mpg_improvement_mean=float(imp.mean()),
                         mpg_improvement_std=float(imp.std()), throughput_delta_mean=float(tp.mean()),
                         throughput_delta_std=float(tp.std())))
    return rows


def load_grid(path: str | Path) -> list[RunSpec]:
    """Expand a grid file into run specs.

    Keys ``trajectories``, ``penetrations``, ``lc``, ``seeds`` are lists;
    every other key is passed to each :class:`RunSpec` unchanged.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"grid file not found: {path}")
    d = yaml.safe_load(path.read_text()) or {}
    if not isinstance(d, dict):
        raise ConfigError("grid", d, "top level must be a mapping")
    d = dict(d)
    trajs = d.pop("trajectories", None)
    if not trajs:
        raise ConfigError("trajectories", trajs, "need at least one trajectory")
    pens = d.pop("penetrations", [0.04])
    lcs = d.pop("lc", [False])
    seeds = d.pop("seeds", [0])
    return [RunSpec.from_dict({**d, "trajectory": t, "penetration": p, "lc_enabled": lc, "seed": s})
            for t in trajs for p in pens for lc in lcs for s in seeds]


# --------------------------------------------------------------------------- #
# exports


def metrics_row(m: RunMetrics, improvement: float) -> list[str]:
    return [m.run_id, m.traj_id, f"{m.penetration:g}", str(int(m.lc_enabled)), repr(float(m.system_mpg)),
            f"{improvement:.6f}", repr(float(m.throughput_vph)), str(m.collisions)]


def write_metrics(rows: Sequence[Sequence[str]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def write_comparisons(comparisons: Sequence[Comparison], path: str | Path) -> None:
    rows, seen = [], set()
    for c in comparisons:
        if c.baseline.run_id not in seen:
            seen.add(c.baseline.run_id)
            rows.append(metrics_row(c.baseline, 0.0))
        rows.append(metrics_row(c.controlled, c.mpg_improvement_pct))
    write_metrics(rows, path)


def export_tsd(tsd: TimeSpace, path: str | Path) -> int:
    """Write ``vehicle_id,t,x,v`` rows; returns the row count."""
    with Path(path).open("w", newline="") as fh:
        fh.write("vehicle_id,t,x,v\n")
        for i, t, x, v in zip(tsd.ids, tsd.t, tsd.x, tsd.v):
            fh.write(f"{i},{t:.1f},{x:.4f},{v:.4f}\n")
    return len(tsd)


def export_gap_trace(trace: GapTrace, path: str | Path) -> int:
    """Write ``t,h,h_min,h_max,branch`` rows, branch by name; returns the row count."""
    names = {**kernels.BRANCH_NAMES, WARMUP: "Warmup"}
    with Path(path).open("w", newline="") as fh:
        fh.write("t,h,h_min,h_max,branch\n")
        for t, h, lo, hi, b in zip(trace.t, trace.h, trace.h_min, trace.h_max, trace.branch):
            fh.write(f"{t:.1f},{h:.4f},{lo:.4f},{hi:.4f},{names[b]}\n")
    return len(trace.t)
