import csv
from dataclasses import replace

import numpy as np
import pytest

from wavesmooth.control import AUG_DIM, OBS_DIM, load_checkpoint
from wavesmooth.core import CONFIG_DIR, SimConfig, TrainConfig, load_config, parse_layout
from wavesmooth.data import resolve_trajectory
from wavesmooth.rl.env import TrainEnv, hash_chunk, scale_unit
from wavesmooth.rl.train import LOG_HEADER, collect, train
from wavesmooth.control import PolicyParameters


def tiny_cfg(**train_kw):
    tc = TrainConfig(batch_size=100, minibatch_size=50, hidden=(8, 8), epochs_per_iter=2, checkpoint_every=1,
                     iterations=2, **train_kw)
    return replace(SimConfig(), platoon_layout=parse_layout(["leader", "av", "human*3"]), horizon_env_steps=10,
                   reward=replace(SimConfig().reward, platoon_size_n=4), train=tc)


def test_env_shapes_and_warm_start():
    cfg = SimConfig()
    env = TrainEnv(cfg, [resolve_trajectory("train_1")], n_envs=3)
    env.reset(np.random.default_rng(0))
    obs, aug = env.observe()
    assert obs.shape == (3, OBS_DIM) and aug.shape == (3, AUG_DIM)
    assert np.array_equal(aug[:, :OBS_DIM], obs)
    # speed history pre-filled with the starting speed
    assert np.all(obs[:, 5:10] == obs[:, [5]])
    assert np.all(np.abs(aug) <= 1.0)
    r = env.step(np.zeros(3))
    assert r.shape == (3,) and np.all(np.isfinite(r)) and np.all(r <= 0)
    assert env.step_idx == cfg.action_repeat and not env.done


def test_env_runs_to_horizon_without_collision():
    cfg = SimConfig()
    env = TrainEnv(cfg, [resolve_trajectory(t) for t in cfg.train.trajectories], n_envs=8)
    rng = np.random.default_rng(1)
    env.reset(rng)
    while not env.done:
        env.step(rng.uniform(-3, 1.5, env.n_agents))
    assert env.decision == cfg.horizon_env_steps


def test_env_layout_checks():
    cfg = replace(SimConfig(), platoon_layout=parse_layout(["leader", "human*8"]))
    with pytest.raises(ValueError):
        TrainEnv(cfg, [resolve_trajectory("train_1")], 1)


def test_scaling_helpers():
    assert float(scale_unit(2.5, 5.0)) == 0.0 and float(scale_unit(50.0, 5.0)) == 1.0
    h = [hash_chunk(c) for c in range(100)]
    assert all(-1.0 <= x <= 1.0 for x in h) and len(set(h)) == 100
    assert hash_chunk(17) == hash_chunk(17)


def test_collect_counts():
    cfg = tiny_cfg()
    env = TrainEnv(cfg, [resolve_trajectory("train_1")], n_envs=4)
    p = PolicyParameters.init(np.random.default_rng(0), (8, 8))
    b = collect(env, p, np.random.default_rng(0))
    assert b.n_transitions == 4 * 10 and b.n_rollouts == 4
    np.testing.assert_allclose(b.episode_returns, b.reward.sum(axis=0))
    assert np.all((b.action >= -3) & (b.action <= 1.5))


def test_two_iterations_bookkeeping(tmp_path):
    cfg = tiny_cfg()
    res = train(cfg, tmp_path, seed=3)
    assert [r["iter"] for r in res.rows] == [1, 2]
    assert res.transitions_per_iter == 100 and res.rollouts_per_iter == 10
    with (tmp_path / "train_log.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_HEADER and len(rows) == 3
    assert [p.name for p in res.checkpoints] == ["iter_00001.wspol", "iter_00002.wspol"]
    assert load_checkpoint(res.checkpoints[-1]).equal(res.params)
    assert load_checkpoint(tmp_path / "policy.wspol").equal(res.params)


def test_training_is_deterministic(tmp_path):
    cfg = tiny_cfg()
    a = train(cfg, tmp_path / "a", seed=5, strict_deterministic=True)
    b = train(cfg, tmp_path / "b", seed=5, strict_deterministic=True)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert a.params.equal(b.params)
    assert (tmp_path / "a" / "timing.csv").exists()
    c = train(cfg, None, seed=6)
    assert not c.params.equal(a.params)


def test_full_scale_rollout_accounting():
    cfg = load_config(CONFIG_DIR / "full_scale.yaml")
    cfg = replace(cfg, train=replace(cfg.train, hidden=(8,), epochs_per_iter=1))
    res = train(cfg, None, seed=0, iterations=1)
    assert res.transitions_per_iter == 9000
    assert res.rollouts_per_iter == 180
