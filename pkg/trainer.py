"""Episodic training with SGD + momentum, step learning-rate decay and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple

import numpy as np

import encoder
import tensor as T
from checkpoint import Checkpoint, save_checkpoint
from encoder import EncoderConfig, EncoderParams
from episodes import (ClassSplit, Episode, SplitConfig, episode_seed, hflip_episode, sample_episode,
                      split_from_config)
from prototypes import MetricConfig, downsample_mask, par_loss, predict_mask, seg_loss, segment_query, total_loss
from shapes import ShapeDatasetConfig
from validation import (ConfigError, NumericalError, ShapeError, validate_choice, validate_non_negative,
                        validate_positive, validate_range, ALLOWED_DISTANCES)

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss.csv"
LOSS_LOG_HEADER = ("iter", "lr", "loss_seg", "loss_par")
FINAL_CHECKPOINT_NAME = "checkpoint.panc"
FLIP_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 2000
    lambda_par: float = 1.0
    alpha: float = 20.0
    distance: str = "cosine"
    way: int = 1
    shot: int = 1
    n_query: int = 1
    support_instances: int = 1
    hflip_augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        """Raises ConfigError on the first out-of-range value."""
        validate_non_negative("train.iterations", self.iterations)
        validate_positive("train.lr", self.lr)
        validate_range("train.momentum", self.momentum, 0.0, 1.0, include_high=False)
        validate_non_negative("train.weight_decay", self.weight_decay)
        validate_range("train.lr_decay_factor", self.lr_decay_factor, 0.0, 1.0, include_low=False)
        validate_non_negative("train.lr_decay_every", self.lr_decay_every)
        validate_non_negative("train.lambda_par", self.lambda_par)
        validate_positive("train.alpha", self.alpha)
        validate_choice("train.distance", self.distance, ALLOWED_DISTANCES)
        for name in ("way", "shot", "n_query", "support_instances"):
            validate_positive(f"train.{name}", getattr(self, name))
        validate_non_negative("train.checkpoint_every", self.checkpoint_every)
        validate_non_negative("train.log_every", self.log_every)
        return self

    def metric(self) -> MetricConfig:
        return MetricConfig(alpha=self.alpha, distance=self.distance)


@dataclass(frozen=True)
class SGDState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: EncoderParams) -> "SGDState":
        return cls({name: np.zeros(t.shape) for name, t in params.tensors.items()})


class StepResult(NamedTuple):
    loss_seg: float
    loss_par: float
    params: EncoderParams
    state: SGDState


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_seg: list[float]
    loss_par: list[float]
    log_path: Path | None = None


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: lr * decay_factor ** floor(iteration / decay_every)."""
    if cfg.lr_decay_every <= 0:
        return cfg.lr
    return cfg.lr * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


def sgd_step(params: EncoderParams, grads: Mapping[str, np.ndarray], state: SGDState,
             cfg: TrainConfig, iteration: int = 0) -> tuple[EncoderParams, SGDState]:
    """One momentum update; returns new parameters and state, inputs are untouched.

    g' = g + weight_decay * w, v = momentum * v + g', w = w - lr_t * v.

    Raises:
        ShapeError: If a gradient or velocity does not match its parameter
    """
    lr = lr_at(iteration, cfg)
    new_params, new_velocity = {}, {}
    for name, weight in params.tensors.items():
        if name not in grads or name not in state.velocity:
            raise ShapeError(f"Missing gradient or velocity for parameter {name}")
        w, g, v = weight.data, np.asarray(grads[name]), state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(f"Parameter {name} {w.shape} vs gradient {g.shape} / velocity {v.shape}")
        v = cfg.momentum * v + (g + cfg.weight_decay * w)
        new_velocity[name] = v
        new_params[name] = w - lr * v
    return EncoderParams.from_arrays(params.config, new_params), SGDState(new_velocity)


def episode_loss(params: EncoderParams, episode: Episode, cfg: TrainConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor | None]:
    """Forward pass over one episode on the active tape.

    Returns:
        (total, seg, par); par is None when lambda_par is 0 and PAR is
        never computed
    """
    metric = cfg.metric()
    ds = params.config.downsample_factor
    support_features = [[encoder.forward(params, pair.image) for pair in slot] for slot in episode.support]
    support_masks = [[downsample_mask(pair.mask, ds) for pair in slot] for slot in episode.support]
    flat_features = [f for slot in support_features for f in slot]
    flat_masks = [m for slot in support_masks for m in slot]

    seg_terms, par_terms = [], []
    for query in episode.query:
        query_features = encoder.forward(params, query.image)
        _, probs = segment_query(flat_features, flat_masks, query_features, episode.way, metric)
        seg_terms.append(seg_loss(probs, downsample_mask(query.mask, ds)))
        if cfg.lambda_par > 0:
            par_terms.append(par_loss(support_features, support_masks, query_features,
                                      predict_mask(probs), episode.way, metric))

    l_seg = seg_terms[0] if len(seg_terms) == 1 else T.mean(T.stack(seg_terms))
    if not par_terms:
        return l_seg, l_seg, None
    l_par = par_terms[0] if len(par_terms) == 1 else T.mean(T.stack(par_terms))
    return total_loss(l_seg, l_par, cfg.lambda_par), l_seg, l_par


def train_episode(params: EncoderParams, episode: Episode, cfg: TrainConfig,
                  state: SGDState | None = None, iteration: int = 0) -> StepResult:
    """Prototypes, query loss, PAR, backward and one SGD step on one episode.

    Raises:
        NumericalError: If the loss or a gradient is not finite
    """
    state = state or SGDState.zeros(params)
    with T.GradTape() as tape:
        loss, l_seg, l_par = episode_loss(params, episode, cfg)
    seg_value = l_seg.item()
    par_value = l_par.item() if l_par is not None else 0.0
    if not np.isfinite(loss.item()):
        raise NumericalError(f"Non-finite loss at iteration {iteration}: seg={seg_value} par={par_value}")

    grads = tape.backward(loss, list(params))
    arrays = {}
    for name, weight in params.tensors.items():
        g = grads[weight].data
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for {name} at iteration {iteration}")
        arrays[name] = g
    new_params, new_state = sgd_step(params, arrays, state, cfg, iteration)
    return StepResult(seg_value, par_value, new_params, new_state)


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average; early entries average over what is available."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ConfigError(f"Smoothing window must be >= 1, got: {window}")
    if values.size == 0:
        return values
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    start = np.maximum(idx - window, 0)
    return (csum[idx] - csum[start]) / (idx - start)


def make_checkpoint(params: EncoderParams, state: SGDState, iteration: int, cfg: TrainConfig,
                    dataset: ShapeDatasetConfig, split: SplitConfig) -> Checkpoint:
    return Checkpoint(encoder=params.config, params=params.arrays(),
                      velocity={k: v.copy() for k, v in state.velocity.items()},
                      iteration=iteration, seed=cfg.seed, train=dataclasses.asdict(cfg),
                      dataset=dataclasses.asdict(dataset), split=dataclasses.asdict(split))


def _from_dict(cls, data: Mapping[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys in checkpoint: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**values)


def configs_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainConfig, ShapeDatasetConfig, SplitConfig]:
    """Rebuild the configs a checkpoint was trained with."""
    return (_from_dict(TrainConfig, ckpt.train), _from_dict(ShapeDatasetConfig, ckpt.dataset),
            _from_dict(SplitConfig, ckpt.split))


def check_checkpoint_classes(ckpt: Checkpoint, dataset: ShapeDatasetConfig, split_config: SplitConfig) -> None:
    """Refuse a dataset/split that differs from the one the checkpoint was trained on.

    The seen and unseen class sets and the image size must match, otherwise
    "unseen" evaluation could score classes the model was trained on.

    Raises:
        ConfigError: Naming the trained and the configured values
    """
    _, trained_dataset, trained_split = configs_from_checkpoint(ckpt)
    trained = split_from_config(trained_dataset, trained_split)
    current = split_from_config(dataset, split_config)
    problems = []
    if trained_dataset.image_size != dataset.image_size:
        problems.append(f"dataset.image_size {trained_dataset.image_size} != {dataset.image_size}")
    if trained.seen != current.seen or trained.unseen != current.unseen:
        problems.append(f"seen classes {sorted(trained.seen)} != {sorted(current.seen)}")
    if problems:
        raise ConfigError("Checkpoint was trained with a different dataset split: " + "; ".join(problems))


def _read_log_prefix(path: Path, start: int) -> list[list[str]]:
    if start == 0 or not path.is_file():
        return []
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))[1:]
    return [row for row in rows if int(row[0]) < start]


EpisodeSource = Callable[[int], Episode]


def train(cfg: TrainConfig, split: ClassSplit,
          dataset: ShapeDatasetConfig = ShapeDatasetConfig(),
          encoder_config: EncoderConfig = EncoderConfig(),
          out_dir: str | Path | None = None,
          split_config: SplitConfig = SplitConfig(),
          resume: Checkpoint | None = None,
          episode_source: EpisodeSource | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train the encoder on episodes from the seen classes.

    Episode i is sampled with seed ``episode_seed(cfg.seed, i)`` and flipped
    with seed ``episode_seed(cfg.seed, i, 1)``, so any iteration can be
    reproduced in isolation and a resumed run continues the exact stream.
    Support shapes are drawn so they stay visible at the encoder stride.

    Args:
        cfg: Training hyperparameters
        split: Class split; only ``split.seen`` is used
        dataset: Shape dataset configuration
        encoder_config: Encoder architecture (ignored when resuming)
        out_dir: If set, receives ``loss.csv`` and checkpoints
        split_config: Recorded in checkpoints for evaluation
        resume: Checkpoint to continue from
        episode_source: Optional replacement for the episode generator,
            called with the iteration index (used for training from disk)
        progress: Optional sink for ``iter=... lr=... seg=... par=...`` lines

    Returns:
        TrainResult with the final checkpoint and per-iteration losses

    Raises:
        ConfigError: On invalid configuration
        NumericalError: If training diverges
        OSError: If outputs cannot be written
    """
    cfg.validate()
    dataset.validate()
    if resume is not None:
        params, state, start = resume.encoder_params(), SGDState(dict(resume.velocity)), resume.iteration
        logger.info(f"Resuming training at iteration {start} of {cfg.iterations}")
    else:
        encoder_config.validate(dataset.image_size)
        params = encoder.init_params(encoder_config, cfg.seed)
        state, start = SGDState.zeros(params), 0
    if start > cfg.iterations:
        raise ConfigError(f"Checkpoint iteration {start} exceeds train.iterations {cfg.iterations}")
    seen = split.part("seen")
    grid = params.config.downsample_factor
    if episode_source is None and len(seen) < cfg.way:
        raise ConfigError(f"Seen split has {len(seen)} classes, train.way is {cfg.way}")

    out = Path(out_dir) if out_dir is not None else None
    log_path = out / LOSS_LOG_NAME if out is not None else None
    rows = _read_log_prefix(log_path, start) if log_path is not None else []
    log_file = writer = None
    if log_path is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("w", newline="", encoding="utf-8")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOSS_LOG_HEADER)
        writer.writerows(rows)

    logger.info(f"Training {cfg.way}-way {cfg.shot}-shot for {cfg.iterations - start} iterations "
                f"(lambda_par={cfg.lambda_par}, alpha={cfg.alpha}, distance={cfg.distance})")
    loss_seg, loss_par = [], []
    try:
        for i in range(start, cfg.iterations):
            if episode_source is not None:
                episode = episode_source(i)
            else:
                episode = sample_episode(seen, cfg.way, cfg.shot, cfg.n_query, episode_seed(cfg.seed, i),
                                         dataset, support_instances=cfg.support_instances, grid=grid)
            if cfg.hflip_augment:
                episode = hflip_episode(episode, episode_seed(cfg.seed, i, FLIP_STREAM))
            step = train_episode(params, episode, cfg, state, i)
            params, state = step.params, step.state
            loss_seg.append(step.loss_seg)
            loss_par.append(step.loss_par)
            lr = lr_at(i, cfg)
            if writer is not None:
                writer.writerow((i, repr(lr), repr(step.loss_seg), repr(step.loss_par)))
            if cfg.log_every and (i % cfg.log_every == 0 or i == cfg.iterations - 1):
                line = f"iter={i} lr={lr:.6g} seg={step.loss_seg:.6f} par={step.loss_par:.6f}"
                logger.info(line)
                if progress is not None:
                    progress(line)
            done = i + 1
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.iterations:
                save_checkpoint(make_checkpoint(params, state, done, cfg, dataset, split_config),
                                out / f"checkpoint_{done:06d}.panc")
    finally:
        if log_file is not None:
            log_file.close()

    final = make_checkpoint(params, state, cfg.iterations, cfg, dataset, split_config)
    if out is not None:
        save_checkpoint(final, out / FINAL_CHECKPOINT_NAME)
    return TrainResult(final, loss_seg, loss_par, log_path)
