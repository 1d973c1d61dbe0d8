"""Tests for the protoseg command line."""
import numpy as np
import pytest
from typer.testing import CliRunner

import cli
from checkpoint import load_checkpoint, save_checkpoint, to_bytes
from cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, app, cmd_gen_data, cmd_train
from config_manager import RunConfigManager
from encoder import BlockConfig, EncoderConfig, EncoderParams
from episodes import SplitConfig, sample_episode
from evaluation import read_report_kv
from pgm_utils import MANIFEST_NAME, load_episode, read_manifest, read_pgm, write_episode
from shapes import SHAPE_NAMES, ShapeDatasetConfig
from trainer import FINAL_CHECKPOINT_NAME, LOSS_LOG_NAME, SGDState, TrainConfig, make_checkpoint
from validation import ConfigError, NumericalError

TINY_INI = """\
[dataset]
image_size = 16

[encoder]
blocks = 4:2:1, 4:1:2

[train]
iterations = 2
log_every = 1

[eval]
episodes = 2
runs = 1
probe_episodes = 2
"""

runner = CliRunner()


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.delenv("PROTOSEG_CONFIG", raising=False)
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    result = runner.invoke(app, ["--config", config_file, "train", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_gen_data_writes_episodes(tmp_path, config_file):
    """gen-data writes episode folders, a manifest and the config echo."""
    out = tmp_path / "data"
    result = runner.invoke(app, ["--config", config_file, "gen-data", str(out), "-n", "3", "--split", "unseen"])
    assert result.exit_code == 0, result.output
    assert "wrote 3 episodes" in result.output
    dirs = read_manifest(out)
    assert [d.name for d in dirs] == ["episode_00000", "episode_00001", "episode_00002"]
    assert "split_part = unseen" in (out / MANIFEST_NAME).read_text()
    assert (out / "config.ini").is_file()
    episode = load_episode(dirs[0])
    assert episode.query[0].image.shape == (1, 16, 16)


def test_gen_data_way_and_shots(tmp_path, config_file):
    """Episode geometry options reach the generator."""
    out = tmp_path / "data"
    result = runner.invoke(app, ["--config", config_file, "gen-data", str(out), "--way", "2", "--shots", "3"])
    assert result.exit_code == 0, result.output
    episode = load_episode(read_manifest(out)[0])
    assert episode.way == 2 and episode.shot == 3


def test_train_writes_log_and_checkpoint(trained):
    """train writes loss.csv, the final checkpoint and config.ini."""
    assert (trained / LOSS_LOG_NAME).read_text().count("\n") == 3
    assert load_checkpoint(trained / FINAL_CHECKPOINT_NAME).iteration == 2
    assert "[train]" in (trained / "config.ini").read_text()


def test_train_progress_lines(tmp_path, config_file):
    """Progress lines go to stdout."""
    result = runner.invoke(app, ["--config", config_file, "train", str(tmp_path / "run"), "--iterations", "1"])
    assert result.exit_code == 0, result.output
    assert "iter=0 lr=" in result.output


def test_eval_writes_report(tmp_path, config_file, trained):
    """eval prints the report and writes .txt and .kv files."""
    out = tmp_path / "eval"
    result = runner.invoke(app, ["--config", config_file, "eval", str(trained / FINAL_CHECKPOINT_NAME), str(out),
                                 "--probe-alignment"])
    assert result.exit_code == 0, result.output
    assert "mean IoU" in result.output
    entries = read_report_kv(out / "report_model_dense_1shot.kv")
    assert entries["runs"] == "1"
    assert "proto_align_distance" in entries


def test_eval_init_baseline(tmp_path, config_file, trained):
    """--init-baseline evaluates the untrained encoder under its own label."""
    out = tmp_path / "eval"
    result = runner.invoke(app, ["--config", config_file, "eval", str(trained / FINAL_CHECKPOINT_NAME), str(out),
                                 "--init-baseline", "--annotation", "scribble"])
    assert result.exit_code == 0, result.output
    assert read_report_kv(out / "report_init_scribble_1shot.kv")["label"] == "init"


@pytest.mark.parametrize("dataset_lines", [
    "image_size = 16\nsplit_seed = 7",
    "image_size = 16\nfold = 1",
    "image_size = 16\nnum_classes = 10",
    "image_size = 32",
])
def test_eval_with_other_split_exits_2(tmp_path, config_file, trained, dataset_lines):
    """Test evaluating under a class split or image size the checkpoint was not trained with."""
    other = tmp_path / "other.ini"
    other.write_text(TINY_INI.replace("image_size = 16", dataset_lines))
    out = tmp_path / "eval"
    result = runner.invoke(app, ["--config", str(other), "eval", str(trained / FINAL_CHECKPOINT_NAME), str(out)])
    assert result.exit_code == EXIT_CONFIG
    assert "different dataset split" in result.output
    assert not (out / "report_model_dense_1shot.kv").exists()


def test_cmd_eval_checks_split_before_evaluating(tmp_path, config_file, trained, monkeypatch):
    """No episode is evaluated when the split does not match."""
    run_config = RunConfigManager(config_file).build({"dataset.split_seed": 7})
    monkeypatch.setattr(cli, "evaluate", lambda *a, **k: pytest.fail("evaluate was called"))
    with pytest.raises(ConfigError, match="seen classes"):
        cli.cmd_eval(run_config, str(trained / FINAL_CHECKPOINT_NAME), tmp_path / "eval")


def test_demo_writes_masks(tmp_path, config_file, trained):
    """demo writes a prediction and a comparison panel per query."""
    data = tmp_path / "data"
    assert runner.invoke(app, ["--config", config_file, "gen-data", str(data)]).exit_code == 0
    out = tmp_path / "demo"
    result = runner.invoke(app, ["--config", config_file, "demo", str(trained / FINAL_CHECKPOINT_NAME),
                                 str(read_manifest(data)[0]), str(out)])
    assert result.exit_code == 0, result.output
    pred = read_pgm(out / "query_0_pred.pgm")
    assert pred.shape == (16, 16)
    assert set(pred.ravel()) <= {0, 1}
    assert read_pgm(out / "query_0_compare.pgm").shape == (16, 48)


def test_unknown_config_key_exits_2(tmp_path):
    """Test a config file with an unknown key."""
    path = tmp_path / "bad.ini"
    path.write_text("[train]\nlearning_speed = 3\n")
    result = runner.invoke(app, ["--config", str(path), "train", str(tmp_path / "run")])
    assert result.exit_code == EXIT_CONFIG
    assert "Error:" in result.output


def test_invalid_option_value_exits_2(tmp_path, config_file):
    """Test an out-of-range command line override."""
    result = runner.invoke(app, ["--config", config_file, "train", str(tmp_path / "run"), "--momentum", "1.5"])
    assert result.exit_code == EXIT_CONFIG


def test_bad_annotation_exits_2(tmp_path, config_file, trained):
    """Test an unknown annotation kind."""
    result = runner.invoke(app, ["--config", config_file, "eval", str(trained / FINAL_CHECKPOINT_NAME),
                                 str(tmp_path / "eval"), "--annotation", "polygon"])
    assert result.exit_code == EXIT_CONFIG


def test_missing_checkpoint_exits_3(tmp_path, config_file):
    """Test evaluating a checkpoint that does not exist."""
    result = runner.invoke(app, ["--config", config_file, "eval", str(tmp_path / "absent.panc"),
                                 str(tmp_path / "eval")])
    assert result.exit_code == EXIT_IO


def test_missing_config_file_exits_3(tmp_path):
    """Test an explicit config path that does not exist."""
    result = runner.invoke(app, ["--config", str(tmp_path / "nope.ini"), "train", str(tmp_path / "run")])
    assert result.exit_code == EXIT_IO


def test_numerical_failure_exits_4(tmp_path, config_file, monkeypatch):
    """A NaN during training maps to exit code 4."""
    def explode(*args, **kwargs):
        raise NumericalError("Non-finite loss at iteration 0")
    monkeypatch.setattr(cli, "train", explode)
    result = runner.invoke(app, ["--config", config_file, "train", str(tmp_path / "run")])
    assert result.exit_code == EXIT_NUMERIC


def test_training_from_disk_matches_generator(tmp_path, config_file):
    """Episodes dumped by gen-data train to the same checkpoint as the generator."""
    run_config = RunConfigManager(config_file).build({"train.iterations": 3})
    cmd_gen_data(run_config, tmp_path / "data", episodes=3)
    from_disk = cmd_train(run_config, tmp_path / "disk", data_dir=str(tmp_path / "data"))
    generated = cmd_train(run_config, tmp_path / "gen")
    assert to_bytes(from_disk.checkpoint) == to_bytes(generated.checkpoint)


def test_resume_via_command_line(tmp_path, config_file):
    """--resume continues from a periodic checkpoint."""
    out = tmp_path / "run"
    first = runner.invoke(app, ["--config", config_file, "train", str(out), "--iterations", "2",
                                "--checkpoint-every", "1"])
    assert first.exit_code == 0, first.output
    result = runner.invoke(app, ["--config", config_file, "train", str(tmp_path / "resumed"), "--iterations", "2",
                                 "--checkpoint-every", "1", "--resume", str(out / "checkpoint_000001.panc")])
    assert result.exit_code == 0, result.output
    assert to_bytes(load_checkpoint(tmp_path / "resumed" / FINAL_CHECKPOINT_NAME)) == \
        to_bytes(load_checkpoint(out / FINAL_CHECKPOINT_NAME))


def _oracle_checkpoint(path):
    """Hand-set encoder for noiseless shapes: a 3x3 opening of the foreground plus a constant channel."""
    config = EncoderConfig(blocks=(BlockConfig(1, 1, 1), BlockConfig(2, 1, 1)))
    kernel0, kernel1 = np.zeros((1, 1, 3, 3)), np.zeros((2, 1, 3, 3))
    kernel0[0, 0, 1, 1] = -20.0    # 20 * (0.5 - x): >= 2 on background, <= -2 on foreground
    kernel1[0, 0, 1, 1] = -1.0
    arrays = {"block0.kernel": kernel0, "block0.bias": np.array([10.0]),
              "block1.kernel": kernel1, "block1.bias": np.array([1.0, 1.0])}
    params = EncoderParams.from_arrays(config, arrays)
    ckpt = make_checkpoint(params, SGDState.zeros(params), 0, TrainConfig(iterations=0),
                           ShapeDatasetConfig(noise_std=0.0), SplitConfig())
    return save_checkpoint(ckpt, path)


def test_demo_oracle_checkpoint_on_golden_episode(tmp_path):
    """On a fixed noiseless episode the predicted masks match ground truth on >= 95% of pixels."""
    dataset = ShapeDatasetConfig(noise_std=0.0)
    episode = sample_episode([SHAPE_NAMES.index("square")], 1, 1, 2, 1234, dataset)
    write_episode(episode, tmp_path / "golden")
    checkpoint = _oracle_checkpoint(tmp_path / "oracle.panc")
    written = cli.cmd_demo(str(checkpoint), str(tmp_path / "golden"), tmp_path / "demo")
    assert len(written) == 2
    for path, query in zip(written, episode.query):
        agreement = (read_pgm(path) == query.mask).mean()
        assert agreement >= 0.95, f"{path.name}: {agreement:.3f}"
