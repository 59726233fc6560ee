import json

import pytest

from spkadapt.config import ConfigError, RunConfig, env_overrides, resolve, set_key, system_adapt


def test_defaults_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.save(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert again.train.adapt.norm_axis == "T" and again.train.adapt.norm_before_specaug


def test_set_key_coerces_by_field_type():
    cfg = set_key(RunConfig(), "train.epochs", "7")
    cfg = set_key(cfg, "train.adapt.specaug_joint", "off")
    cfg = set_key(cfg, "edges", "4,10")
    cfg = set_key(cfg, "model.d_model", "32")
    assert cfg.train.epochs == 7 and cfg.train.adapt.specaug_joint is False
    assert cfg.edges == (4.0, 10.0) and cfg.model.d_model == 32
    with pytest.raises(ConfigError):
        set_key(cfg, "train.nonsense", "1")
    with pytest.raises(ConfigError):
        set_key(cfg, "train.adapt.specaug_joint", "maybe")


def test_precedence_file_env_flags(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "train": {"epochs": 5, "warmup_steps": 10}}))
    env = {"SPKADAPT_TRAIN__EPOCHS": "6", "SPKADAPT_SEED": "2", "OTHER": "x"}
    assert env_overrides(env) == {"train.epochs": "6", "seed": "2"}
    cfg = resolve(tmp_path / "c.json", {"seed": 3}, env)
    assert cfg.seed == 3 and cfg.train.epochs == 6 and cfg.train.warmup_steps == 10


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigError, match="valid systems"):
        RunConfig(systems=("baseline", "z_cat"))
    (tmp_path / "bad.json").write_text('{"train": {"epochz": 1}}')
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "broken.json")


def test_system_adapt_modes():
    cfg = RunConfig()
    assert system_adapt(cfg, "s_cat").mode == "cat"
    assert system_adapt(cfg, "x_add").mode == "add"
    assert system_adapt(cfg, "baseline").mode == "none"
