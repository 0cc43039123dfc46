import dataclasses

import pytest
import yaml
from hypothesis import given, strategies as st

from wavesmooth.core import (CONFIG_DIR, ConfigError, SimConfig, VehicleKind, apply_overrides, config_from_dict,
                             config_hash, config_to_dict, dump_config, load_config, parse_layout, format_layout)


def write(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data) if not isinstance(data, str) else data)
    return p


def test_minimal_file_fills_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 7}))
    assert cfg.seed == 7
    assert cfg.dt == 0.1 and cfg.action_repeat == 10
    assert cfg.speed_bounds == (0.0, 35.0) and cfg.accel_bounds == (-3.0, 1.5)
    assert cfg.horizon_env_steps == 50 and cfg.horizon_sim_steps == 500


def test_zero_dt_names_the_field(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, {"sim": {"dt": 0}}))
    assert "dt" in str(err.value)
    assert err.value.value == 0


def test_reward_coefficients_echoed(tmp_path):
    cfg = load_config(write(tmp_path, {"reward": {"c1": 0.06, "c2": 0.02, "c3": 0.6, "c4": 0.005}}))
    assert (cfg.reward.c1, cfg.reward.c2, cfg.reward.c3, cfg.reward.c4) == (0.06, 0.02, 0.6, 0.005)


@pytest.mark.parametrize("data, field", [
    ({"sim": {"action_repeat": 0}}, "action_repeat"),
    ({"sim": {"speed_bounds": [10, 5]}}, "speed_bounds"),
    ({"sim": {"accel_bounds": [1, -1]}}, "accel_bounds"),
    ({"sim": {"platoon_layout": ["human", "leader"]}}, "platoon_layout"),
    ({"sim": {"platoon_layout": []}}, "platoon_layout"),
    ({"idm": {"T": -1}}, "idm.T"),
    ({"idm": {"delta": 0.5}}, "idm.delta"),
    ({"reward": {"c3": -0.1}}, "reward.c3"),
    ({"reward": {"platoon_size_n": 0}}, "platoon_size_n"),
    ({"train": {"gamma": 1.5}}, "train.gamma"),
    ({"train": {"clip_eps": 0}}, "train.clip_eps"),
    ({"lanechange": {"ratio_clip": [0.8, 0.2]}}, "ratio_clip"),
    ({"lanechange": {"min_insert_gap": 1.0}}, "min_insert_gap"),
    ({"planner": {"bandwidth": 0}}, "planner.bandwidth"),
    ({"seed": -1}, "seed"),
    ({"idm": {"nope": 1}}, "nope"),
    ({"bogus_section": {}}, "bogus_section"),
])
def test_invalid_values_rejected(tmp_path, data, field):
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, data))
    assert field in str(err.value)


def test_missing_and_unparseable_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "sim: {dt: [unclosed"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "- a list\n- not a mapping\n"))


def test_empty_file_is_all_defaults(tmp_path):
    assert load_config(write(tmp_path, "")) == SimConfig()


def test_layout_parsing():
    lay = parse_layout(["leader", "av", "human*3"])
    assert lay == (VehicleKind.LEADER, VehicleKind.AV) + (VehicleKind.HUMAN,) * 3
    assert parse_layout(format_layout(lay)) == lay
    with pytest.raises(ConfigError):
        parse_layout(["leader", "truck"])


def test_overrides_dotted_keys():
    data = apply_overrides({"idm": {"T": 1.0}}, ["idm.T=1.2", "sim.dt=0.05", "train.hidden=[8, 8]"])
    cfg = config_from_dict(data)
    assert cfg.idm.T == 1.2 and cfg.dt == 0.05 and cfg.train.hidden == (8, 8)
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        config_from_dict(apply_overrides({}, ["idm.T=fast"]))


def test_committed_configs_load():
    desk = load_config(CONFIG_DIR / "default.yaml")
    assert desk == SimConfig()
    full = load_config(CONFIG_DIR / "full_scale.yaml")
    assert full.train.batch_size == 9000 and full.train.minibatch_size == 3000
    assert full.train.iterations == 2500 and full.reward.platoon_size_n == 25
    assert full.platoon_layout.count(VehicleKind.HUMAN) == 24


def test_hash_tracks_content():
    a, b = SimConfig(), SimConfig(seed=1)
    assert config_hash(a) == config_hash(SimConfig())
    assert config_hash(a) != config_hash(b)


config_dicts = st.fixed_dictionaries({
    "seed": st.integers(0, 2 ** 31),
    "sim": st.fixed_dictionaries({
        "dt": st.floats(0.01, 1.0),
        "action_repeat": st.integers(1, 20),
        "speed_bounds": st.tuples(st.floats(0, 10), st.floats(20, 40)).map(list),
    }),
    "idm": st.fixed_dictionaries({"T": st.floats(0.5, 2.0), "a_max": st.floats(0.5, 2.5),
                                  "s0": st.floats(0.5, 3.9)}),
    "reward": st.fixed_dictionaries({"c1": st.floats(0, 1), "c4": st.floats(0, 1)}),
    "train": st.fixed_dictionaries({"lr": st.floats(1e-6, 1e-2), "gamma": st.floats(0.5, 1.0)}),
})


@given(config_dicts)
def test_round_trip(data):
    cfg = config_from_dict(data)
    again = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


def test_config_is_immutable():
    cfg = SimConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.dt = 0.2
