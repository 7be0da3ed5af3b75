"""Layered config: defaults, file values, overrides, strict key validation."""

import pytest
import yaml

from soundext.config import ConfigError, RunConfig, load_run_config, save_run_config


def test_defaults_without_file():
    cfg = load_run_config(None)
    assert cfg.seed == 0
    assert cfg.generator.n_events == 3
    assert cfg.model.enc_filters == 256
    assert cfg.training.alpha == 3.0
    assert cfg.training.lr == 1e-4
    assert cfg.adaptation.epochs == 10
    assert cfg.adaptation.lr == 1e-3
    assert cfg.metrics.sdr_cap_db == 60.0


def test_file_values_override_defaults(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        yaml.safe_dump({"seed": 5, "training": {"mode": "one_hot", "batch_size": 2}}),
        encoding="utf-8",
    )
    cfg = load_run_config(path)
    assert cfg.seed == 5
    assert cfg.training.mode == "one_hot"
    assert cfg.training.batch_size == 2
    assert cfg.training.alpha == 3.0  # untouched default


def test_cli_overrides_beat_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"training": {"batch_size": 2}}), encoding="utf-8")
    cfg = load_run_config(path, overrides=["training.batch_size=16", "seed=9"])
    assert cfg.training.batch_size == 16
    assert cfg.seed == 9


def test_unknown_top_level_key_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("bogus: 1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown top-level"):
        load_run_config(path)


def test_unknown_section_key_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"training": {"learning_rate": 1.0}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="section 'training'.*unknown keys"):
        load_run_config(path)


def test_invalid_section_value_reports_section():
    with pytest.raises(ConfigError, match="section 'training'"):
        load_run_config(None, overrides=["training.mode=bogus"])


def test_override_without_equals_rejected():
    with pytest.raises(ConfigError, match="section.key=value"):
        load_run_config(None, overrides=["training.batch_size"])


def test_override_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        load_run_config(None, overrides=["nonsense.x=1"])


def test_effective_config_roundtrip(tmp_path):
    cfg = load_run_config(None, overrides=["generator.n_events=2", "model.enc_filters=16",
                                           "model.bottleneck=8", "model.conv_channels=16",
                                           "model.blocks_per_repeat=2", "model.repeats=1",
                                           "model.embed_dim=8"])
    save_run_config(cfg, tmp_path / "eff.yaml")
    again = load_run_config(tmp_path / "eff.yaml")
    assert again == cfg
