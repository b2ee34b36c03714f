"""
Unit tests for configuration loading and validation.

Tests cover:
- Configuration file loading (JSON and YAML)
- Presets for every study
- Model, schedule and study-level validation
- Invalid configuration handling
- Dotted overrides and environment variables
"""

import json

import pytest
import yaml

from config import (
    ExperimentConfig,
    MAEConfig,
    ModelConfig,
    PermutationSpec,
    ScheduleConfig,
    apply_overrides,
    desk_preset,
    load_config,
    full_preset,
    save_config,
    thread_limit,
)
from errors import ConfigError

STUDIES = ["supervised", "mae_pretrain", "mae_finetune", "pe_ablation", "permutation_study", "trend_sweep", "lr_sweep"]


@pytest.mark.unit
@pytest.mark.config
class TestConfigurationLoading:
    """Test suite for configuration files."""

    def test_load_valid_config_file(self, temp_config_file, tmp_path):
        """Test loading a valid configuration file."""
        cfg = load_config(temp_config_file)

        assert isinstance(cfg, ExperimentConfig)
        assert cfg.seed == 3
        assert cfg.model.dim == 16
        assert cfg.dataset.count == 16

    def test_relative_paths_resolve_against_file(self, temp_config_file, tmp_path):
        """Test that relative paths are anchored at the config's directory."""
        cfg = load_config(temp_config_file)

        assert cfg.output_dir == str((tmp_path / "out").resolve())

    def test_yaml_config(self, tmp_path):
        """Test that YAML files load through the same path."""
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"study": "supervised", "model": {"pe": "none"}, "output_dir": "/tmp/x"}))

        cfg = load_config(path)

        assert cfg.model.pe == "none"
        assert cfg.output_dir == "/tmp/x"

    def test_overrides_applied_after_file(self, temp_config_file):
        """Test dotted-key overrides."""
        cfg = load_config(temp_config_file, {"seed": 9, "model.pe": "none", "schedule.total_epochs": 5})

        assert cfg.seed == 9
        assert cfg.model.pe == "none"
        assert cfg.model.dim == 16
        assert cfg.schedule.total_epochs == 5

    def test_save_and_reload(self, tmp_path):
        """Test that a saved config reloads unchanged."""
        cfg = apply_overrides(desk_preset("permutation_study"), {"output_dir": str(tmp_path / "o")})
        path = save_config(cfg, tmp_path / "saved.json")

        assert json.loads(path.read_text())["study"] == "permutation_study"
        assert load_config(path) == cfg


@pytest.mark.unit
@pytest.mark.config
class TestInvalidConfiguration:
    """Test suite for configuration errors."""

    def test_missing_file(self, tmp_path):
        """Test that a missing file is reported with its path."""
        missing = tmp_path / "nope.json"

        with pytest.raises(ConfigError, match="nope.json"):
            load_config(missing)

    def test_invalid_file(self, invalid_config_file):
        """Test that schema violations raise ConfigError naming the file."""
        with pytest.raises(ConfigError) as excinfo:
            load_config(invalid_config_file)

        message = str(excinfo.value)
        assert invalid_config_file in message
        assert "colour" in message

    def test_unparseable_file(self, tmp_path):
        """Test that broken syntax raises ConfigError."""
        path = tmp_path / "broken.yaml"
        path.write_text("model: [unclosed\n")

        with pytest.raises(ConfigError, match="could not parse"):
            load_config(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        """Test that a list document is rejected."""
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")

        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_invalid_override(self):
        """Test that overrides are re-validated."""
        with pytest.raises(ConfigError):
            apply_overrides(desk_preset(), {"model.heads": 5})


@pytest.mark.unit
@pytest.mark.config
class TestModelValidation:
    """Test suite for model config rules."""

    @pytest.mark.parametrize(
        "fields",
        [
            dict(dim=10, heads=3),
            dict(tokenizer="pixel", patch_size=2),
            dict(tokenizer="patch", patch_size=5, image_size=32),
            dict(tokenizer="permuted-patch", patch_size=4),
            dict(pe="sincos", dim=18, heads=2),
            dict(head="cls", use_cls=False),
        ],
    )
    def test_rejected(self, fields):
        with pytest.raises(ValueError):
            ModelConfig(**fields)

    def test_permuted_patch_with_permutation(self):
        cfg = ModelConfig(tokenizer="permuted-patch", patch_size=4, permutation=PermutationSpec(swaps=10, delta="inf"))
        assert cfg.permutation.delta is None
        assert cfg.num_tokens == 64

    def test_pixel_token_geometry(self):
        cfg = ModelConfig(image_size=32)
        assert cfg.num_tokens == 1024
        assert cfg.token_dim == 3

    def test_patch_token_geometry(self):
        cfg = ModelConfig(image_size=32, tokenizer="patch", patch_size=4)
        assert (cfg.num_tokens, cfg.token_dim) == (64, 48)

    def test_presets(self):
        assert ModelConfig.preset("T").dim == 192
        assert ModelConfig.preset("l").layers == 24
        with pytest.raises(ConfigError):
            ModelConfig.preset("XL")

    def test_permutation_delta_bounds(self):
        with pytest.raises(ValueError):
            PermutationSpec(swaps=1, delta=1)

    def test_mae_decoder_heads_divide_dim(self):
        with pytest.raises(ValueError):
            MAEConfig(decoder_dim=10, decoder_heads=4)

    def test_mae_for_encoder(self):
        mae = MAEConfig.for_encoder(ModelConfig.preset("T"), "T")
        assert (mae.decoder_layers, mae.decoder_dim, mae.decoder_heads) == (4, 96, 8)


@pytest.mark.unit
@pytest.mark.config
class TestStudyValidation:
    """Test suite for study-level rules and presets."""

    @pytest.mark.parametrize("study", STUDIES)
    def test_desk_presets_validate(self, study):
        cfg = desk_preset(study)
        assert cfg.study == study
        assert cfg.model.image_size == cfg.dataset.image_size == 8

    @pytest.mark.parametrize("study", STUDIES)
    def test_full_presets_validate(self, study):
        assert full_preset(study).study == study

    def test_full_recipe(self):
        cfg = full_preset("supervised")
        assert (cfg.model.layers, cfg.model.dim) == (12, 192)
        assert cfg.schedule.total_epochs == 2400
        assert cfg.batch_size == 1024

    def test_permutation_study_needs_grid(self):
        with pytest.raises(ValueError):
            ExperimentConfig(study="permutation_study", T_list=[0, 8])

    def test_lr_sweep_needs_lrs(self):
        with pytest.raises(ValueError):
            ExperimentConfig(study="lr_sweep")

    def test_mae_needs_section(self):
        with pytest.raises(ValueError):
            ExperimentConfig(study="mae_pretrain")

    def test_delta_list_parses_inf(self):
        cfg = ExperimentConfig(study="permutation_study", T_list=[4], delta_list=["inf", 4, "2"])
        assert cfg.delta_list == [None, 4, 2]

    def test_delta_below_two(self):
        with pytest.raises(ValueError):
            ExperimentConfig(study="permutation_study", T_list=[4], delta_list=[1])

    @pytest.mark.parametrize("delta", [2.5, "3.7", "-inf", True])
    def test_fractional_delta_rejected(self, delta):
        with pytest.raises(ValueError, match="integer or 'inf'"):
            ExperimentConfig(study="permutation_study", T_list=[4], delta_list=[delta])

    def test_integral_float_delta_accepted(self):
        cfg = ExperimentConfig(study="permutation_study", T_list=[4], delta_list=[4.0, float("inf")])
        assert cfg.delta_list == [4, None]

    def test_fractional_delta_in_file(self, tmp_path):
        path = tmp_path / "perm.yaml"
        path.write_text(yaml.safe_dump({"study": "permutation_study", "T_list": [4], "delta_list": [2.5]}))
        with pytest.raises(ConfigError, match="delta_list"):
            load_config(path)

    def test_warmup_shorter_than_schedule(self):
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_epochs=10, total_epochs=10)


@pytest.mark.unit
@pytest.mark.config
class TestEnvironmentVariables:
    """Test suite for environment-driven settings."""

    def test_thread_limit_default(self, monkeypatch):
        monkeypatch.delenv("PIXTOK_THREADS", raising=False)
        assert thread_limit() == 1

    def test_thread_limit_from_env(self, monkeypatch):
        monkeypatch.setenv("PIXTOK_THREADS", "4")
        assert thread_limit() == 4

    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_thread_limit_rejects(self, monkeypatch, value):
        monkeypatch.setenv("PIXTOK_THREADS", value)
        with pytest.raises(ConfigError):
            thread_limit()
