"""Tests for configuration manager."""
import pytest

from config_manager import (
    CONFIG_ENV,
    RunConfig,
    RunConfigManager,
    apply_values,
    echo_config,
    get_config_manager,
    to_ini,
)
from encoder import BlockConfig
from validation import ConfigError


def test_config_manager_defaults(tmp_path, monkeypatch):
    """Test config manager without any file."""
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    mgr = RunConfigManager()
    assert mgr.config_path is None
    assert mgr.build() == RunConfig()


def test_config_manager_custom_path(tmp_path):
    """Test config manager with custom path."""
    config_file = tmp_path / "run.ini"
    config_file.write_text("""
[train]
iterations = 10
lambda_par = 0.5
hflip_augment = false

[dataset]
image_size = 24
fg_intensity_range = 0.5, 0.9
split_seed = 3
""")

    run = RunConfigManager(str(config_file)).build()

    assert run.train.iterations == 10
    assert run.train.lambda_par == 0.5
    assert run.train.hflip_augment is False
    assert run.dataset.image_size == 24
    assert run.dataset.fg_intensity_range == (0.5, 0.9)
    assert run.split.split_seed == 3


def test_config_manager_merge_overrides(tmp_path):
    """Test config merging with overrides."""
    config_file = tmp_path / "run.ini"
    config_file.write_text("[train]\niterations = 10\nway = 2\n")

    mgr = RunConfigManager(str(config_file))
    merged = mgr.merge_with_overrides({"train.iterations": 3, "train.shot": None})

    assert merged["train.iterations"] == 3  # Override takes precedence
    assert merged["train.way"] == "2"  # From file
    assert "train.shot" not in merged
    assert mgr.build({"train.iterations": 3}).train.iterations == 3


def test_config_manager_env_path(tmp_path, monkeypatch):
    """Test config discovery through the environment."""
    config_file = tmp_path / "env.ini"
    config_file.write_text("[eval]\nruns = 2\n")
    monkeypatch.setenv(CONFIG_ENV, str(config_file))
    assert RunConfigManager().build().eval.runs == 2


def test_config_manager_nonexistent_file():
    """Test config manager with an explicit missing file."""
    with pytest.raises(FileNotFoundError):
        RunConfigManager("/nonexistent/protoseg.ini")


def test_unknown_key_rejected(tmp_path):
    """Unknown keys are errors, not silently ignored."""
    config_file = tmp_path / "run.ini"
    config_file.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfigManager(str(config_file)).build()


def test_unknown_section_rejected():
    """Test unknown sections."""
    with pytest.raises(ConfigError, match="Unknown config section"):
        apply_values(RunConfig(), {"optimizer.lr": "0.1"})


def test_invalid_value_rejected():
    """Test values of the wrong type or range."""
    with pytest.raises(ConfigError, match="train.iterations"):
        apply_values(RunConfig(), {"train.iterations": "many"})
    with pytest.raises(ConfigError, match="train.lr"):
        apply_values(RunConfig(), {"train.lr": "-1"}).validate()
    with pytest.raises(ConfigError, match="distance"):
        apply_values(RunConfig(), {"train.distance": "manhattan"}).validate()


def test_dashed_keys_accepted():
    """Test that dashes in keys map onto underscores."""
    run = apply_values(RunConfig(), {"train.lambda-par": "0"})
    assert run.train.lambda_par == 0.0


def test_encoder_blocks_parsed():
    """Test the encoder block list syntax."""
    run = apply_values(RunConfig(), {"encoder.blocks": "8:2:1, 8:2:1"})
    assert run.encoder.blocks == (BlockConfig(8, 2, 1), BlockConfig(8, 2, 1))
    assert run.encoder.downsample_factor == 4


def test_indivisible_image_size_rejected():
    """Image size must be a multiple of the encoder downsample factor."""
    with pytest.raises(ConfigError, match="not divisible"):
        apply_values(RunConfig(), {"dataset.image_size": "30"}).validate()


def test_way_exceeding_split_rejected():
    """Test the cross-section check between way and the split sizes."""
    with pytest.raises(ConfigError, match="eval.way"):
        apply_values(RunConfig(), {"eval.way": "5"}).validate()


def test_ini_round_trip(tmp_path):
    """Rendered INI text reads back into the same configuration."""
    run = apply_values(RunConfig(), {"train.iterations": "7", "annotations.kind": "scribble",
                                     "encoder.blocks": "8:2:1,16:2:1"})
    path = echo_config(run, tmp_path)
    assert path.name == "config.ini"
    assert RunConfigManager(str(path)).build() == run
    assert "[annotations]" in to_ini(run)


def test_get_config_manager_cached(tmp_path, monkeypatch):
    """Test the global manager instance."""
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr("config_manager._config_manager", None)
    first = get_config_manager()
    assert get_config_manager() is first
    config_file = tmp_path / "other.ini"
    config_file.write_text("[eval]\nepisodes = 3\n")
    assert get_config_manager(str(config_file)) is not first


def test_example_config_matches_defaults():
    """The shipped example file spells out the built-in defaults."""
    from pathlib import Path

    example = Path(__file__).resolve().parent.parent / "config" / "example.ini"
    assert RunConfigManager(str(example)).build() == RunConfig()
