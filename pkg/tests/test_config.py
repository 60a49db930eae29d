"""Tests for configuration loading and validation."""

from pathlib import Path

import pytest

from priorfill.config import (
    RUN_DIR_ENV,
    AlignmentConfig,
    MaskMixtureConfig,
    RunConfig,
    default_run_dir,
    load_mask_config,
    load_run_config,
)
from priorfill.errors import ConfigurationError


class TestRunConfig:
    """Tests for the run configuration."""

    def test_defaults_validate(self) -> None:
        """Test that the default configuration is consistent."""
        config = load_run_config()

        assert config.profile == "desk"
        assert config.mae.num_patches == config.alignment.num_tokens
        assert config.vae.latent_size == 16

    def test_full_profile_rejected(self) -> None:
        """Test that the 512px profile is recognised but not supported."""
        with pytest.raises(ConfigurationError, match="not supported"):
            load_run_config(overrides={"profile": "full"})

    def test_unknown_profile_rejected(self) -> None:
        """Test that unknown profiles raise."""
        with pytest.raises(ConfigurationError, match="Unknown resolution profile"):
            RunConfig(profile="huge").validate()

    def test_cross_stage_dimension_mismatch(self) -> None:
        """Test that the alignment input must match the MAE token width."""
        with pytest.raises(ConfigurationError, match="alignment.in_dim"):
            load_run_config(overrides={"alignment.in_dim": 32})

    def test_dotted_override(self) -> None:
        """Test that dotted overrides reach nested configs and None values are ignored."""
        config = load_run_config(overrides={"alignment.lr": 3e-4, "seed": 9, "decoder.lr": None})

        assert config.alignment.lr == 3e-4
        assert config.seed == 9
        assert config.decoder.lr == 8e-5

    def test_unknown_override_key(self) -> None:
        """Test that overriding a key that does not exist raises."""
        with pytest.raises(ConfigurationError, match="Unknown config key"):
            load_run_config(overrides={"vae.depth": 3})

    def test_toml_file(self, tmp_path: Path) -> None:
        """Test loading stage tables from TOML, lists becoming tuples."""
        path = tmp_path / "run.toml"
        path.write_text('seed = 5\n\n[vae]\nchannel_mult = [1, 2]\n\n[alignment]\nvariant = "linear_only"\n')

        config = load_run_config(path)

        assert config.seed == 5
        assert config.vae.channel_mult == (1, 2)
        assert config.vae.latent_size == 32
        assert config.alignment.effective_blocks == 0

    def test_unknown_toml_key(self, tmp_path: Path) -> None:
        """Test that unknown keys in a stage table raise."""
        path = tmp_path / "run.toml"
        path.write_text("[mae]\ndepth = 3\n")

        with pytest.raises(ConfigurationError, match="Unknown MAEConfig keys: depth"):
            load_run_config(path)

    def test_invalid_toml(self, tmp_path: Path) -> None:
        """Test that malformed TOML is reported with the path."""
        path = tmp_path / "broken.toml"
        path.write_text("[vae\n")

        with pytest.raises(ConfigurationError, match="Invalid TOML"):
            load_run_config(path)


class TestRunDirectory:
    """Tests for run directory resolution."""

    def test_environment_variable(self, tmp_path: Path, monkeypatch) -> None:
        """Test that the environment variable sets the default run directory."""
        monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "runs"))

        assert default_run_dir() == (tmp_path / "runs").resolve()
        assert RunConfig().resolved_run_dir == (tmp_path / "runs").resolve()

    def test_explicit_run_dir_wins(self, tmp_path: Path, monkeypatch) -> None:
        """Test that an explicit run_dir takes precedence over the environment."""
        monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "env"))

        assert RunConfig(run_dir=str(tmp_path / "mine")).resolved_run_dir == (tmp_path / "mine").resolve()


class TestStageConfigs:
    """Tests for individual stage config invariants."""

    def test_alignment_large_lr(self) -> None:
        """Test that the large learning rate is opt-in."""
        assert AlignmentConfig().effective_lr == 1e-4
        assert AlignmentConfig(use_large_lr=True).effective_lr == 5e-2

    def test_alignment_variant_blocks(self) -> None:
        """Test the number of attention blocks per variant."""
        assert AlignmentConfig(variant="attn1").effective_blocks == 1
        assert AlignmentConfig(variant="cross_x4").effective_blocks == 4

    def test_eval_mixture_renormalizes(self) -> None:
        """Test that the evaluation mixture drops rectangles and renormalizes."""
        mixture = MaskMixtureConfig().eval_mixture()

        assert set(mixture.weights) == {"object", "comod", "lama"}
        assert sum(mixture.weights.values()) == pytest.approx(1.0)
        assert mixture.weights["object"] == pytest.approx(0.5 / 0.9)
        assert (mixture.ratio_min, mixture.ratio_max) == (0.2, 0.8)

    def test_mask_config_from_bare_table(self, tmp_path: Path) -> None:
        """Test that standalone mask configs load from a bare or [masks] table."""
        bare = tmp_path / "bare.toml"
        bare.write_text("ratio_min = 0.2\n")
        nested = tmp_path / "nested.toml"
        nested.write_text("[masks]\nratio_max = 0.6\n")

        assert load_mask_config(bare).ratio_min == 0.2
        assert load_mask_config(nested).ratio_max == 0.6

    def test_mask_ratio_bounds_validated(self) -> None:
        """Test that inverted ratio bounds raise."""
        with pytest.raises(ConfigurationError, match="ratio_min"):
            MaskMixtureConfig(ratio_min=0.8, ratio_max=0.2).validate()
