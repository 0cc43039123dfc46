import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from wavesmooth.data import (DATASET_SPECS, LeaderTrajectory, TrajectoryError, WaveSpec, chunk_id,
                             generate_dataset, generate_synthetic_wave, is_valid_speed_series, load_trajectory,
                             resolve_trajectory, sample_chunk, save_trajectory)


def write_csv(path, t, v):
    path.write_text("t,v\n" + "".join(f"{a},{b}\n" for a, b in zip(t, v)))
    return path


def test_load_5000_rows(tmp_path):
    t = np.arange(5000) * 0.1
    traj = load_trajectory(write_csv(tmp_path / "x.csv", t, np.full(5000, 20.0)))
    assert len(traj) == 5000 and traj.id == "x"
    assert traj.dt == pytest.approx(0.1)
    assert traj.positions[-1] == pytest.approx(20.0 * 499.9)


def test_single_row_rejected(tmp_path):
    with pytest.raises(TrajectoryError):
        load_trajectory(write_csv(tmp_path / "x.csv", [0.0], [10.0]))


def test_negative_speed_clipped_and_counted(tmp_path):
    v = [10.0, -1.0, 10.0]
    traj = load_trajectory(write_csv(tmp_path / "x.csv", [0.0, 0.1, 0.2], v))
    assert traj.n_clipped == 1
    assert traj.v[1] == 0.0


@pytest.mark.parametrize("body", ["", "time,speed\n0,1\n0.1,1\n", "t,v\n0,abc\n0.1,1\n", "t,v\n0,1\n0.3,1\n0.4,1\n"])
def test_malformed_files(tmp_path, body):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(TrajectoryError):
        load_trajectory(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_trajectory(tmp_path / "nope.csv")
    with pytest.raises(FileNotFoundError):
        resolve_trajectory("no_such_dataset")


def test_save_load_round_trip(tmp_path):
    traj = generate_synthetic_wave(WaveSpec(200.0, 25.0, 2, 5.0), np.random.default_rng(0), "rt")
    save_trajectory(traj, tmp_path / "rt.csv")
    back = load_trajectory(tmp_path / "rt.csv")
    np.testing.assert_allclose(back.v, traj.v, rtol=1e-9)
    np.testing.assert_allclose(back.t, traj.t)


def test_chunk_of_exact_length_starts_at_zero():
    traj = LeaderTrajectory("a", np.arange(500) * 0.1, np.full(500, 10.0))
    rng = np.random.default_rng(0)
    assert all(sample_chunk(traj, rng).start_index == 0 for _ in range(20))


def test_chunk_deterministic_given_seed():
    traj = LeaderTrajectory("a", np.arange(5000) * 0.1, np.linspace(0, 30, 5000))
    a = sample_chunk(traj, np.random.default_rng(42))
    b = sample_chunk(traj, np.random.default_rng(42))
    assert a.start_index == b.start_index and a.chunk_id == b.chunk_id


def test_chunk_too_short():
    traj = LeaderTrajectory("a", np.arange(499) * 0.1, np.full(499, 10.0))
    with pytest.raises(TrajectoryError):
        sample_chunk(traj, np.random.default_rng(0))


def test_chunk_start_uniform_chi_square():
    traj = LeaderTrajectory("u", np.arange(1500) * 0.1, np.full(1500, 10.0))
    rng = np.random.default_rng(7)
    starts = np.array([sample_chunk(traj, rng).start_index for _ in range(100_000)])
    counts = np.bincount(starts, minlength=1001)
    assert len(counts) == 1001
    assert stats.chisquare(counts).pvalue > 0.01


@given(st.integers(500, 3000), st.integers(0, 2 ** 32 - 1))
def test_chunk_matches_source_slice(n, seed):
    v = np.random.default_rng(seed).uniform(0, 35, n)
    traj = LeaderTrajectory("s", np.arange(n) * 0.1, v)
    c = sample_chunk(traj, np.random.default_rng(seed))
    assert 0 <= c.start_index <= n - 500 and len(c) == 500
    assert np.array_equal(c.v, traj.v[c.start_index:c.start_index + 500])
    assert np.array_equal(c.t, traj.t[c.start_index:c.start_index + 500])


@given(st.lists(st.tuples(st.text(min_size=1, max_size=8), st.integers(0, 10 ** 6)), min_size=2, max_size=30,
                unique=True))
def test_chunk_ids_injective(pairs):
    ids = {chunk_id(s, i) for s, i in pairs}
    # only a CRC32 collision between distinct names could merge two pairs
    names = {s for s, _ in pairs}
    if len({chunk_id(s, 0) for s in names}) == len(names):
        assert len(ids) == len(pairs)


def test_zero_waves_constant():
    traj = generate_synthetic_wave(WaveSpec(100.0, 28.0, 0, 28.0), np.random.default_rng(0))
    assert len(traj) == 1000
    assert np.all(traj.v == 28.0)


def test_five_waves_depth():
    traj = generate_synthetic_wave(WaveSpec(600.0, 28.0, 5, 2.0), np.random.default_rng(3))
    assert abs(traj.v.min() - 2.0) <= 0.1
    assert traj.v.max() <= 28.0
    assert len(traj) == 6000


def test_infeasible_spec():
    with pytest.raises(TrajectoryError):
        generate_synthetic_wave(WaveSpec(30.0, 30.0, 5, 0.0), np.random.default_rng(0))


@given(st.floats(60, 900), st.floats(5, 35), st.integers(0, 6), st.floats(0, 1), st.integers(0, 1000))
def test_generated_waves_valid(duration, v_base, n_waves, depth, seed):
    v_min = v_base * depth
    spec = WaveSpec(duration, v_base, n_waves, v_min)
    try:
        traj = generate_synthetic_wave(spec, np.random.default_rng(seed))
    except TrajectoryError:
        # only infeasible slot budgets may fail
        assert n_waves > 0 and 2 * (v_base - v_min) / 3.0 + 0.2 > duration / n_waves
        return
    assert is_valid_speed_series(traj.v, traj.dt)
    assert np.max(np.abs(np.diff(traj.v))) / traj.dt <= 3.0 + 1e-9
    assert traj.v.min() >= v_min - 1e-9 and traj.v.max() <= v_base + 1e-9
    assert len(traj) == int(round(duration / 0.1))


def test_committed_dataset_matches_generator(tmp_path):
    paths = generate_dataset(tmp_path)
    assert len(paths) == len(DATASET_SPECS) == 10
    for p in paths:
        fresh = load_trajectory(p)
        committed = resolve_trajectory(p.stem)
        assert committed.id == p.stem
        np.testing.assert_array_equal(fresh.v, committed.v)
        assert is_valid_speed_series(committed.v, committed.dt)
