"""PPO training loop with CSV logging and periodic checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wavesmooth.control import PolicyParameters, act_batch, log_prob, save_checkpoint, value_batch
from wavesmooth.core import SimConfig
from wavesmooth.data import resolve_trajectory
from wavesmooth.rl.env import TrainEnv
from wavesmooth.rl.ppo import Adam, Minibatch, backprop_and_step, compute_gae, normalize

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "mean_ep_reward", "policy_loss", "value_loss", "entropy", "grad_norm", "wall_s")


@dataclass
class RolloutBatch:
    obs: np.ndarray
    aug: np.ndarray
    u: np.ndarray
    action: np.ndarray
    logp: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    done: np.ndarray
    last_value: np.ndarray
    episode_returns: np.ndarray

    @property
    def n_transitions(self) -> int:
        return self.u.size

    @property
    def n_rollouts(self) -> int:
        return len(self.episode_returns)


@dataclass
class TrainResult:
    params: PolicyParameters
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    transitions_per_iter: int = 0
    rollouts_per_iter: int = 0


def collect(env: TrainEnv, params: PolicyParameters, rng: np.random.Generator) -> RolloutBatch:
    """Run every episode of ``env`` to its horizon with the stochastic policy."""
    H = env.cfg.horizon_env_steps
    M = env.n_agents
    env.reset(rng)
    obs = np.empty((H, M, 14))
    aug = np.empty((H, M, 20))
    u = np.empty((H, M))
    act = np.empty((H, M))
    logp = np.empty((H, M))
    rew = np.empty((H, M))
    val = np.empty((H, M))
    for t in range(H):
        o, g = env.observe()
        a, uu, mean = act_batch(params, o, True, rng)
        obs[t], aug[t], u[t], act[t] = o, g, uu, a
        logp[t] = log_prob(uu, mean, params.log_std)
        val[t] = value_batch(params, g)
        rew[t] = env.step(a)
    _, g = env.observe()
    last = value_batch(params, g)
    return RolloutBatch(obs, aug, u, act, logp, rew, val, np.zeros((H, M)), last, rew.sum(axis=0))


def train(cfg: SimConfig, out_dir: str | Path | None = None, seed: int | None = None,
          strict_deterministic: bool = False, iterations: int | None = None,
          planner_enabled: bool | None = None) -> TrainResult:
    """Train a policy from scratch.

    Writes ``train_log.csv`` and ``checkpoints/iter_XXXXX.wspol`` under
    ``out_dir`` when it is given. In strict mode the ``wall_s`` column is 0
    so that logs of repeated runs compare byte for byte; timings then go to
    ``timing.csv``.
    """
    tc = cfg.train
    seed = cfg.seed if seed is None else seed
    iterations = tc.iterations if iterations is None else iterations
    rng = np.random.default_rng(seed)
    trajs = [resolve_trajectory(t) for t in tc.trajectories]
    per_env = cfg.horizon_env_steps * int(sum(1 for k in cfg.platoon_layout if k.name == "AV"))
    n_envs = max(1, math.ceil(tc.batch_size / per_env))
    env = TrainEnv(cfg, trajs, n_envs, planner_enabled)
    params = PolicyParameters.init(rng, tc.hidden, tc.log_std_init)
    opt = Adam(params.flat().size, tc.lr)
    result = TrainResult(params)

    out = Path(out_dir) if out_dir is not None else None
    writer = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "train_log.csv").open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        if strict_deterministic:
            th = (out / "timing.csv").open("w", newline="")
            timing = csv.writer(th, lineterminator="\n")
            timing.writerow(("iter", "wall_s"))
    t_start = time.perf_counter()
    try:
        for it in range(1, iterations + 1):
            batch = collect(env, params, rng)
            adv, ret = compute_gae(batch.reward, batch.value, batch.done, tc.gamma, tc.gae_lambda, batch.last_value)
            n = batch.n_transitions
            data = Minibatch(batch.obs.reshape(n, -1), batch.aug.reshape(n, -1), batch.u.ravel(),
                             batch.logp.ravel(), normalize(adv.ravel()), ret.ravel(), batch.value.ravel())
            stats = []
            for _ in range(tc.epochs_per_iter):
                perm = rng.permutation(n)
                for s in range(0, n, tc.minibatch_size):
                    mb = data.take(perm[s:s + tc.minibatch_size])
                    params, st, gn = backprop_and_step(params, mb, opt, tc.clip_eps, tc.value_coeff,
                                                       tc.entropy_coeff, tc.clip_value, tc.max_grad_norm)
                    stats.append((st.policy_loss, st.value_loss, st.entropy, gn))
            pl, vl, ent, gn = np.mean(stats, axis=0)
            wall = time.perf_counter() - t_start
            row = dict(iter=it, mean_ep_reward=float(batch.episode_returns.mean()), policy_loss=float(pl),
                       value_loss=float(vl), entropy=float(ent), grad_norm=float(gn),
                       wall_s=0.0 if strict_deterministic else wall)
            result.rows.append(row)
            result.transitions_per_iter = n
            result.rollouts_per_iter = batch.n_rollouts
            if writer is not None:
                writer.writerow([it] + [repr(row[k]) for k in LOG_HEADER[1:-1]] + [f"{row['wall_s']:.3f}"])
                fh.flush()
                if timing is not None:
                    timing.writerow((it, f"{wall:.3f}"))
            log.info("iter %d reward %.3f policy %.4f value %.4f", it, row["mean_ep_reward"], pl, vl)
            if out is not None and (it % tc.checkpoint_every == 0 or it == iterations):
                path = out / "checkpoints" / f"iter_{it:05d}.wspol"
                save_checkpoint(params, path)
                result.checkpoints.append(path)
    finally:
        if writer is not None:
            fh.close()
            if timing is not None:
                th.close()
    if out is not None:
        save_checkpoint(params, out / "policy.wspol")
    result.params = params
    return result
