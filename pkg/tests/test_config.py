import json

import pytest
import yaml

from temporal_lanes.config import PRESETS, ConfigError, RunConfig, load_config
from temporal_lanes.scene_sim import SimConfig


def test_defaults_validate():
    cfg = load_config(environ={})
    assert cfg == RunConfig()
    assert cfg.model.stride == 8 and cfg.optim.batch_size == 8 and cfg.optim.steps == 2000
    assert (cfg.sim.image_height, cfg.sim.image_width) == (72, 96)


def test_sim_settings_mirror_sim_config():
    """Every generator field is reachable from the run configuration and vice versa."""
    import dataclasses

    sim_fields = {f.name for f in dataclasses.fields(SimConfig)} - {"y_grid"}
    assert set(RunConfig().sim.model_dump()) == sim_fields
    assert RunConfig().sim_config().y_grid == RunConfig().y_grid


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        load_config(overrides={"optim": {"learning_rate": 1.0}}, environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"bogus": 1}, environ={})


@pytest.mark.parametrize("override", [
    {"optim": {"lr": -1.0}},
    {"optim": {"batch_size": 0}},
    {"model": {"stride": 4}},
    {"model": {"query_dim": 30, "attn_heads": 4}},
    {"model": {"depth_min": 90.0}},
    {"model": {"temporal_gap": 3}},
    {"loss": {"w_x": -0.1}},
    {"y_grid": [3.0, 2.0]},
    {"num_categories": 5},
    {"model": {"crop": {"x0": 0.9, "width": 0.5}}},
    {"sim": {"image_height": 70}},
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=override, environ={})


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "optim": {"lr": 0.5, "steps": 7}}))
    env = {"GTA_OPTIM__LR": "0.25", "GTA_SEED": "4", "OTHER": "x"}
    cfg = load_config(path, overrides={"seed": 5}, environ=env)
    assert (cfg.seed, cfg.optim.lr, cfg.optim.steps) == (5, 0.25, 7)
    cfg = load_config(path, environ=env)
    assert cfg.seed == 4


def test_json_file_and_presets(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"optim": {"steps": 11}}))
    cfg = load_config(path, preset="desk", environ={})
    assert cfg.optim.steps == 11 and cfg.optim.lr == PRESETS["desk"]["optim"]["lr"]
    paper = load_config(preset="paper-scale", environ={})
    assert (paper.sim.image_height, paper.optim.batch_size, paper.optim.epochs) == (720, 64, 24)
    with pytest.raises(ConfigError):
        load_config(preset="nope", environ={})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p, environ={})


def test_config_hash_tracks_content():
    a, b = RunConfig(), load_config(overrides={"optim": {"lr": 1e-3}}, environ={})
    assert a.config_hash() == RunConfig().config_hash()
    assert a.config_hash() != b.config_hash()


def test_depth_bins_uniform_in_inverse_depth():
    bins = RunConfig().depth_bins()
    assert len(bins) == 8 and bins[0] == pytest.approx(3.0) and bins[-1] == pytest.approx(80.0)
    inv = 1.0 / bins
    assert max(abs(inv[1:] - inv[:-1] - (inv[1] - inv[0]))) < 1e-12
