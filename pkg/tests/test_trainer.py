"""Tests for SGD, the training loop, logging and resume."""
import csv
import dataclasses

import numpy as np
import pytest

import encoder
import trainer
from checkpoint import load_checkpoint, to_bytes
from encoder import BlockConfig, EncoderConfig
from episodes import make_split, sample_episode
from shapes import ShapeDatasetConfig
from tensor import GradTape, Tensor
from trainer import (
    FINAL_CHECKPOINT_NAME,
    LOSS_LOG_NAME,
    SGDState,
    TrainConfig,
    configs_from_checkpoint,
    episode_loss,
    lr_at,
    sgd_step,
    smoothed,
    train,
    train_episode,
)
from validation import ConfigError, NumericalError

DATASET = ShapeDatasetConfig(image_size=16)
ENCODER = EncoderConfig(blocks=(BlockConfig(4, 2, 1), BlockConfig(4, 1, 2)))
SPLIT = make_split(12, 1.0 / 3.0, 0)
FAST = TrainConfig(iterations=3, lr=0.01, log_every=1)


def _episode(seed=0, way=1):
    return sample_episode(SPLIT.part("seen"), way, 1, 1, seed, DATASET, grid=ENCODER.downsample_factor)


def test_lr_schedule():
    """Step decay by decay_factor every decay_every iterations."""
    cfg = TrainConfig(lr=0.1, lr_decay_factor=0.1, lr_decay_every=2)
    assert [lr_at(i, cfg) for i in range(5)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])
    assert lr_at(10_000, TrainConfig(lr=0.1, lr_decay_every=0)) == 0.1


def test_sgd_step_matches_hand_recursion():
    """Two momentum steps follow v = m v + g + wd w, w = w - lr v."""
    params = encoder.init_params(ENCODER, seed=0)
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01, lr_decay_every=0)
    grads = {name: np.full(t.shape, 0.5) for name, t in params.tensors.items()}
    state = SGDState.zeros(params)

    p1, s1 = sgd_step(params, grads, state, cfg)
    p2, s2 = sgd_step(p1, grads, s1, cfg)

    name = "block0.kernel"
    w0 = params.tensors[name].data
    v1 = 0.5 + 0.01 * w0
    w1 = w0 - 0.1 * v1
    v2 = 0.9 * v1 + 0.5 + 0.01 * w1
    w2 = w1 - 0.1 * v2
    np.testing.assert_allclose(p2.tensors[name].data, w2, rtol=1e-12)
    np.testing.assert_allclose(s2.velocity[name], v2, rtol=1e-12)
    assert np.all(state.velocity[name] == 0.0)
    np.testing.assert_array_equal(params.tensors[name].data, w0)


def test_sgd_zero_gradient_no_decay_is_identity():
    """Zero gradients with zero weight decay leave parameters unchanged."""
    params = encoder.init_params(ENCODER, seed=1)
    cfg = TrainConfig(weight_decay=0.0)
    grads = {name: np.zeros(t.shape) for name, t in params.tensors.items()}
    new, _ = sgd_step(params, grads, SGDState.zeros(params), cfg)
    for name in params.tensors:
        np.testing.assert_array_equal(new.tensors[name].data, params.tensors[name].data)


def test_lambda_zero_skips_par():
    """With lambda = 0 the total loss is the segmentation loss."""
    params = encoder.init_params(ENCODER, seed=0)
    cfg = dataclasses.replace(FAST, lambda_par=0.0)
    with GradTape():
        total, seg, par = episode_loss(params, _episode(), cfg)
    assert par is None
    assert total is seg
    step = train_episode(params, _episode(), cfg)
    assert step.loss_par == 0.0


def test_par_increases_total_loss():
    """With lambda > 0 the total adds the weighted PAR term."""
    params = encoder.init_params(ENCODER, seed=0)
    cfg = dataclasses.replace(FAST, lambda_par=2.0)
    with GradTape():
        total, seg, par = episode_loss(params, _episode(), cfg)
    assert total.item() == pytest.approx(seg.item() + 2.0 * par.item())


def test_train_episode_changes_parameters():
    """One step moves the weights and fills the velocity."""
    params = encoder.init_params(ENCODER, seed=0)
    step = train_episode(params, _episode(1, way=2), FAST)
    assert np.isfinite(step.loss_seg) and np.isfinite(step.loss_par)
    moved = [not np.array_equal(step.params.tensors[n].data, params.tensors[n].data) for n in params.tensors]
    assert any(moved)
    assert any(np.abs(v).sum() > 0 for v in step.state.velocity.values())


def test_train_episode_rejects_non_finite_loss(monkeypatch):
    """A NaN loss stops training with a numerical error."""
    nan = Tensor(float("nan"))
    monkeypatch.setattr(trainer, "episode_loss", lambda params, episode, cfg: (nan, nan, None))
    with pytest.raises(NumericalError, match="Non-finite loss"):
        train_episode(encoder.init_params(ENCODER, 0), _episode(), FAST, iteration=7)


def test_smoothed():
    """Trailing mean over the window."""
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.0, 1.5, 2.5, 3.5])
    assert smoothed([], 5).size == 0
    with pytest.raises(ConfigError):
        smoothed([1.0], 0)


def test_train_writes_log_and_checkpoint(tmp_path):
    """loss.csv has a header plus one row per iteration; the final checkpoint is written."""
    lines = []
    result = train(FAST, SPLIT, DATASET, ENCODER, tmp_path, progress=lines.append)
    with (tmp_path / LOSS_LOG_NAME).open(newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iter", "lr", "loss_seg", "loss_par"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]
    assert float(rows[1][2]) == result.loss_seg[0]
    assert len(lines) == 3 and lines[0].startswith("iter=0 lr=")
    ckpt = load_checkpoint(tmp_path / FINAL_CHECKPOINT_NAME)
    assert ckpt.iteration == 3
    assert to_bytes(ckpt) == to_bytes(result.checkpoint)


def test_train_is_deterministic(tmp_path):
    """Two runs with one seed produce identical checkpoints and logs."""
    a = train(FAST, SPLIT, DATASET, ENCODER, tmp_path / "a")
    b = train(FAST, SPLIT, DATASET, ENCODER, tmp_path / "b")
    assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)
    assert (tmp_path / "a" / LOSS_LOG_NAME).read_bytes() == (tmp_path / "b" / LOSS_LOG_NAME).read_bytes()


def test_zero_iterations_returns_initialisation(tmp_path):
    """iterations = 0 writes the initial weights and an empty log."""
    cfg = dataclasses.replace(FAST, iterations=0)
    result = train(cfg, SPLIT, DATASET, ENCODER, tmp_path)
    init = encoder.init_params(ENCODER, cfg.seed)
    for name, array in result.checkpoint.params.items():
        np.testing.assert_array_equal(array, init.tensors[name].data)
    assert (tmp_path / LOSS_LOG_NAME).read_text().strip() == "iter,lr,loss_seg,loss_par"


def test_resume_matches_uninterrupted_run(tmp_path):
    """Stopping at a checkpoint and resuming reproduces the straight run."""
    cfg = dataclasses.replace(FAST, iterations=4, checkpoint_every=2)
    straight = train(cfg, SPLIT, DATASET, ENCODER, tmp_path / "straight")
    log_before = (tmp_path / "straight" / LOSS_LOG_NAME).read_bytes()

    middle = load_checkpoint(tmp_path / "straight" / "checkpoint_000002.panc")
    assert middle.iteration == 2
    resumed = train(cfg, SPLIT, DATASET, ENCODER, tmp_path / "straight", resume=middle)

    assert to_bytes(resumed.checkpoint) == to_bytes(straight.checkpoint)
    assert resumed.loss_seg == straight.loss_seg[2:]
    assert (tmp_path / "straight" / LOSS_LOG_NAME).read_bytes() == log_before


def test_resume_past_end_rejected(tmp_path):
    """Test resuming from a checkpoint beyond the configured iterations."""
    done = train(FAST, SPLIT, DATASET, ENCODER)
    with pytest.raises(ConfigError, match="exceeds"):
        train(dataclasses.replace(FAST, iterations=2), SPLIT, DATASET, ENCODER, resume=done.checkpoint)


def test_configs_from_checkpoint():
    """Training configs are recoverable from a checkpoint."""
    result = train(dataclasses.replace(FAST, iterations=0), SPLIT, DATASET, ENCODER)
    cfg, dataset, _ = configs_from_checkpoint(result.checkpoint)
    assert cfg == dataclasses.replace(FAST, iterations=0)
    assert dataset == DATASET


def test_train_config_validation():
    """Test invalid hyperparameters."""
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lambda_par=-0.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(distance="l1").validate()
