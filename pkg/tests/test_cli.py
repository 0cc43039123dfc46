import csv

import pytest
import yaml

from wavesmooth.cli import main


@pytest.fixture
def spec(tmp_path):
    p = tmp_path / "spec.yaml"
    p.write_text(yaml.safe_dump({"trajectory": "eval_3", "platoon_size": 20, "penetration": 0.1,
                                 "controller": "reference", "max_steps": 600}))
    return p


def test_help(capsys):
    assert main(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out


def test_bad_usage(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["simulate"]) == 1


def test_missing_spec(tmp_path, capsys):
    missing = tmp_path / "missing.file"
    assert main(["simulate", "--spec", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_simulate_writes_metrics_and_hash(tmp_path, spec, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--spec", str(spec), "--out", str(out), "--seed", "3"]) == 0
    line = capsys.readouterr().out
    assert "config=" in line and "seed=3" in line
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["collisions"] == "0"
    assert set(tmp_path.iterdir()) == {spec, out}


def test_bad_override_and_config(tmp_path, spec, capsys):
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path), "--set", "idm.bogus=1"]) == 1
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path), "--set", "sim.dt=0"]) == 1
    assert "dt" in capsys.readouterr().err
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path), "--seed", "-1"]) == 1


def test_config_from_environment(tmp_path, spec, monkeypatch, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 9\nidm: {T: 1.1}\n")
    monkeypatch.setenv("WAVESMOOTH_CONFIG", str(cfg))
    assert main(["stability", "--out", str(tmp_path / "o"), "--speeds", "10", "25"]) == 0
    env_out = capsys.readouterr().out
    monkeypatch.delenv("WAVESMOOTH_CONFIG")
    assert main(["stability", "--out", str(tmp_path / "o"), "--speeds", "10", "25"]) == 0
    default_out = capsys.readouterr().out
    assert env_out.split("config=")[1] != default_out.split("config=")[1]


def test_stability_report(tmp_path, capsys):
    assert main(["stability", "--out", str(tmp_path), "--speeds", "10", "25"]) == 0
    out = capsys.readouterr().out
    assert "v= 10.00" in out and "unstable" in out.splitlines()[0]
    assert "stable" in out.splitlines()[1] and "boundary=18." in out


def test_evaluate_identity_grid(tmp_path, capsys):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"trajectories": ["eval_1", "eval_2"], "penetrations": [0.1],
                                    "platoon_size": 20, "controller": "idm", "max_steps": 300}))
    out = tmp_path / "o"
    assert main(["evaluate", "--grid", str(grid), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.count("+0.00%") >= 2
    with (out / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(float(r["mpg_improvement_mean"]) == 0.0 for r in rows)
    assert main(["evaluate", "--grid", str(grid), "--out", str(out), "--jobs", "0"]) == 1


def test_export_tsd(tmp_path, spec, capsys):
    out = tmp_path / "o"
    assert main(["export-tsd", "--spec", str(spec), "--out", str(out), "--stride", "10"]) == 0
    assert "rows=" in capsys.readouterr().out
    with (out / "tsd.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["vehicle_id", "t", "x", "v"] and len(rows) == 1 + 21 * 60
    assert (out / "gap_av10.csv").exists() and (out / "gap_av20.csv").exists()


def test_gen_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.csv"))) == 10


def test_train_tiny(tmp_path, capsys):
    out = tmp_path / "t"
    args = ["train", "--out", str(out), "--iterations", "1", "--set", "train.batch_size=100",
            "--set", "train.minibatch_size=50", "--set", "train.hidden=[8]", "--set", "sim.horizon_env_steps=5"]
    assert main(args) == 0
    assert {"config.yaml", "train_log.csv", "policy.wspol"} <= {p.name for p in out.iterdir()}
    assert "iterations=1" in capsys.readouterr().out
    assert main(["train", "--out", str(out), "--iterations", "0"]) == 1
