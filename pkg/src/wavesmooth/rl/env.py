"""Batched training environment.

``n_envs`` independent episodes advance in lockstep as (episodes, vehicles)
arrays. Each episode replays a random chunk of a training trajectory behind
the platoon layout from the config; every AV in the layout is one agent.
"""
from __future__ import annotations

import zlib

import numpy as np

from wavesmooth import kernels
from wavesmooth.control import AUG_DIM, HISTORY, OBS_DIM, build_obs_batch
from wavesmooth.core import MILE, SimConfig, VehicleKind
from wavesmooth.data import LeaderTrajectory, sample_chunk
from wavesmooth.dynamics import CollisionError, equilibrium_gap
from wavesmooth.energy import FuelModel
from wavesmooth.planner import ProfileSchedule
from wavesmooth.rl.ppo import reward

MILES_SCALE = 5.0
GALLONS_SCALE = 1.0
HORIZON_SCALE = 100.0


def scale_unit(x, scale):
    """Map [0, scale] onto [-1, 1], clipping outside."""
    return np.clip(2.0 * np.asarray(x, dtype=float) / scale - 1.0, -1.0, 1.0)


def hash_chunk(cid: int) -> float:
    """Deterministic hash of a chunk id into [-1, 1]."""
    return zlib.crc32(int(cid).to_bytes(8, "little")) / 2 ** 31 - 1.0


class TrainEnv:
    def __init__(self, cfg: SimConfig, trajectories: list[LeaderTrajectory], n_envs: int,
                 planner_enabled: bool | None = None):
        self.cfg = cfg
        self.trajs = trajectories
        self.n_envs = n_envs
        self.layout = np.array([int(k) for k in cfg.platoon_layout])
        self.av_cols = np.flatnonzero(self.layout == int(VehicleKind.AV))
        if len(self.av_cols) == 0:
            raise ValueError("training layout has no AV")
        n = cfg.reward.platoon_size_n
        if self.av_cols[-1] + n > len(self.layout):
            raise ValueError("reward platoon extends past the end of the layout")
        self.n_agents = n_envs * len(self.av_cols)
        self.planner_enabled = cfg.planner.enabled if planner_enabled is None else planner_enabled
        self.schedules = {t.id: ProfileSchedule(t, cfg.planner) for t in trajectories}
        self.fuel = FuelModel(cfg.energy)
        N = len(self.layout)
        self.mask = np.ones((n_envs, N), dtype=bool)
        self.mask[:, 0] = False
        # reward platoon: each AV and its n - 1 followers
        self.platoon_cols = self.av_cols[:, None] + np.arange(n)[None, :]

    # ------------------------------------------------------------------ #

    def reset(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        E, N = self.n_envs, len(self.layout)
        L = cfg.vehicle_length
        H = cfg.horizon_sim_steps
        size = min(H, min(len(t) for t in self.trajs))
        self.chunks = []
        # time-major so each step reads a contiguous row
        self.lead_v = np.empty((H + 1, E))
        self.lead_x = np.empty((H + 1, E))
        self.offset = np.empty(E)
        self.t0 = np.empty(E)
        self.sched = []
        x = np.empty((E, N))
        v = np.empty((E, N))
        av0 = self.av_cols[0]
        for e in range(E):
            traj = self.trajs[int(rng.integers(len(self.trajs)))]
            ch = sample_chunk(traj, rng, size)
            self.chunks.append(ch)
            self.sched.append(self.schedules[traj.id])
            lv = np.concatenate((ch.v, np.full(H + 1 - len(ch.v), ch.v[-1])))
            v0 = float(lv[0])
            s_e = equilibrium_gap(cfg.idm, min(v0, 0.999 * cfg.idm.v0))
            x[e] = (av0 - np.arange(N)) * (s_e + L)
            v[e] = v0
            self.lead_v[:, e] = lv
            self.lead_x[:, e] = x[e, 0] + np.concatenate(([0.0], np.cumsum(0.5 * (lv[1:] + lv[:-1]) * cfg.dt)))
            self.offset[e] = traj.positions[ch.start_index] - x[e, 0]
            self.t0[e] = ch.t[0]
        self.x, self.v = x, v
        self.x_start = x[:, self.av_cols].copy()
        self.lead_dist = self.lead_x[-1] - self.lead_x[0]
        self.history = np.repeat(v[:, self.av_cols][:, :, None], HISTORY, axis=2)
        self.miles = np.zeros((E, len(self.av_cols)))
        self.gallons = np.zeros((E, len(self.av_cols)))
        self.step_idx = 0
        self.decision = 0
        self.chunk_hash = np.array([hash_chunk(c.chunk_id) for c in self.chunks])

    # ------------------------------------------------------------------ #

    def _downstream(self) -> np.ndarray:
        """(E, n_av, 4) planner targets, or the ego speed when the planner is off."""
        v_av = self.v[:, self.av_cols]
        if not self.planner_enabled:
            return np.repeat(v_av[:, :, None], 4, axis=2)
        out = np.empty(v_av.shape + (4,))
        t = self.t0 + self.step_idx * self.cfg.dt
        for e in range(self.n_envs):
            prof = self.sched[e].at(t[e])
            out[e] = prof.query_downstream(self.x[e, self.av_cols] + self.offset[e])
        return out

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        """Scaled observations (agents, 14) and augmented value inputs (agents, 20)."""
        E, A = self.n_envs, len(self.av_cols)
        cols = self.av_cols
        v_av = self.v[:, cols].ravel()
        v_lead = self.v[:, cols - 1].ravel()
        h = (self.x[:, cols - 1] - self.x[:, cols] - self.cfg.vehicle_length).ravel()
        obs = build_obs_batch(v_av, v_lead, h, self.history.reshape(E * A, HISTORY),
                              self._downstream().reshape(E * A, 4))
        aug = np.empty((E * A, AUG_DIM))
        aug[:, :OBS_DIM] = obs
        aug[:, 14] = scale_unit(self.miles.ravel(), MILES_SCALE)
        aug[:, 15] = scale_unit(self.gallons.ravel(), GALLONS_SCALE)
        aug[:, 16] = scale_unit(self.cfg.horizon_env_steps, HORIZON_SCALE)
        aug[:, 17] = np.repeat(self.chunk_hash, A)
        travelled = (self.x[:, cols] - self.x_start) / np.maximum(self.lead_dist, 1.0)[:, None]
        aug[:, 18] = np.clip(2.0 * travelled.ravel() - 1.0, -1.0, 1.0)
        aug[:, 19] = 2.0 * self.decision / self.cfg.horizon_env_steps - 1.0
        return obs, aug

    def step(self, raw: np.ndarray) -> np.ndarray:
        """Advance one decision (``action_repeat`` sim steps). Returns the window-mean reward per agent."""
        cfg = self.cfg
        E, A = self.n_envs, len(self.av_cols)
        cols = self.av_cols
        L, dt = cfg.vehicle_length, cfg.dt
        a_lo, a_hi = cfg.accel_bounds
        v_lo, v_hi = cfg.speed_bounds
        p = cfg.idm
        raw = np.ascontiguousarray(raw, dtype=float)
        gaps = np.empty_like(self.x)
        acc = np.zeros_like(self.x)
        a_eff = np.empty_like(self.x)
        applied = np.empty(E * A)
        branch = np.empty(E * A, dtype=np.int_)
        h_min = np.empty(E * A)
        h_max = np.empty(E * A)
        total = np.zeros(E * A)
        energy_scale = cfg.reward.energy_scale
        for _ in range(cfg.action_repeat):
            k = self.step_idx
            kernels.compute_gaps(self.x, L, gaps)
            kernels.idm_fill(self.v, gaps, self.mask, p.v0, p.T, p.s0, p.a_max, p.b, p.delta, a_lo, acc)
            v_av = np.ascontiguousarray(self.v[:, cols].ravel())
            v_lead = np.ascontiguousarray(self.v[:, cols - 1].ravel())
            h = np.ascontiguousarray(gaps[:, cols].ravel())
            kernels.wrap(raw, v_av, v_lead, h, dt, a_lo, a_hi, v_lo, v_hi, applied, branch, h_min, h_max)
            a_out = np.where(branch == kernels.FAILSAFE, a_lo, np.where(branch == kernels.GAP_CLOSE, a_hi, raw))
            # warm-up: AVs behind x = 0 keep their IDM acceleration
            warm = (self.x[:, cols] < 0).ravel()
            if warm.any():
                idm_av = acc[:, cols].ravel()
                applied = np.where(warm, idm_av, applied)
                a_out = np.where(warm, idm_av, a_out)
            acc[:, cols] = applied.reshape(E, A)
            v_pre = self.v.copy()
            x_pre = self.x[:, cols].copy()
            gmin, r, c = kernels.advance(self.x, self.v, acc, self.lead_x[k + 1], self.lead_v[k + 1], dt,
                                         v_lo, v_hi, L, a_eff)
            if gmin <= 0:
                raise CollisionError(c, c - 1, k, gmin)
            fuel = self.fuel(v_pre[:, self.platoon_cols], a_eff[:, self.platoon_cols])  # (E, A, n)
            r_step = reward((fuel * energy_scale).reshape(E * A, -1), a_out, h, v_av, h_min, h_max, cfg.reward)
            total += r_step
            self.miles += (self.x[:, cols] - x_pre) / MILE
            self.gallons += fuel[:, :, 0] * dt
            self.history = np.concatenate((self.history[:, :, 1:], v_pre[:, cols][:, :, None]), axis=2)
            self.step_idx += 1
        self.decision += 1
        return total / cfg.action_repeat

    @property
    def done(self) -> bool:
        return self.decision >= self.cfg.horizon_env_steps

