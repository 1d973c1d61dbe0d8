"""Prototype extraction, the metric head and both training losses.

Labels follow the episode convention: 0 is background, 1..C are the episode
class slots and ``UNKNOWN_LABEL`` marks pixels of a weak annotation that
belong to no pooling region. Masks are brought to feature resolution with
``downsample_mask`` before any pooling or loss; predictions go back to image
resolution with ``upsample_mask`` only for scoring.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

import tensor as T
from tensor import Tensor
from validation import ConfigError, EpisodeError, ShapeError, validate_positive

logger = logging.getLogger(__name__)

UNKNOWN_LABEL = 255
LOG_CLAMP = 1e-12
CLAMP_PENALTY = -math.log(LOG_CLAMP)


class Distance(str, Enum):
    COSINE = "cosine"
    SQUARED_EUCLIDEAN = "squared_euclidean"


@dataclass(frozen=True)
class MetricConfig:
    alpha: float = 20.0
    distance: Distance = Distance.COSINE

    def __post_init__(self):
        try:
            object.__setattr__(self, "distance", Distance(self.distance))
        except ValueError:
            raise ConfigError(
                f"Unknown distance {self.distance!r}; expected one of {[d.value for d in Distance]}"
            )

    def validate(self) -> "MetricConfig":
        validate_positive("alpha", self.alpha)
        return self


@dataclass(frozen=True)
class PrototypeSet:
    """Foreground prototypes p_1..p_C plus the background prototype.

    ``valid[j]`` is False when label j had no pixel to pool from; such a
    prototype is a zero vector and never takes part in a softmax.
    """
    foreground: tuple[Tensor, ...]
    background: Tensor
    valid: tuple[bool, ...]

    @property
    def way(self) -> int:
        return len(self.foreground)

    @property
    def dim(self) -> int:
        return self.background.shape[0]

    def prototype(self, label: int) -> Tensor:
        return self.background if label == 0 else self.foreground[label - 1]

    def valid_labels(self) -> tuple[int, ...]:
        return tuple(j for j, ok in enumerate(self.valid) if ok)

    def stacked(self) -> tuple[Tensor, tuple[int, ...]]:
        """Valid prototypes as a [J, D] tensor together with their labels."""
        labels = self.valid_labels()
        if not labels:
            raise EpisodeError("PrototypeSet has no valid prototype")
        return T.stack([self.prototype(j) for j in labels]), labels


@dataclass(frozen=True)
class ProbabilityMap:
    """[C + 1, H', W'] class distribution; channels of invalid prototypes are 0."""
    tensor: Tensor
    valid: tuple[bool, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


# Resolution ---------------------------------------------------------------------

def _check_factor(shape: tuple[int, ...], factor: int) -> None:
    if factor < 1:
        raise ShapeError(f"Downsample factor must be >= 1, got {factor}")
    if len(shape) != 2 or shape[0] % factor or shape[1] % factor:
        raise ShapeError(f"Mask of shape {shape} is not divisible by factor {factor}")


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Keep the top-left label of every factor x factor cell.

    Raises:
        ShapeError: If the factor does not divide both mask dimensions
    """
    mask = np.asarray(mask)
    _check_factor(mask.shape, factor)
    return mask[::factor, ::factor].copy()


def downsample_weak_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a mask that may contain ``UNKNOWN_LABEL``.

    Each cell takes its first known label in row-major order (the top-left
    one when it is known) and stays unknown only if the whole cell is
    unknown. On fully known masks this equals ``downsample_mask``.
    """
    mask = np.asarray(mask)
    _check_factor(mask.shape, factor)
    h, w = mask.shape[0] // factor, mask.shape[1] // factor
    cells = mask.reshape(h, factor, w, factor).transpose(0, 2, 1, 3).reshape(h, w, factor * factor)
    known = cells != UNKNOWN_LABEL
    first = np.take_along_axis(cells, known.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return np.where(known.any(axis=-1), first, UNKNOWN_LABEL).astype(mask.dtype)


def upsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of a label mask to ``shape``."""
    mask = np.asarray(mask)
    rows = T.nearest_indices(mask.shape[0], shape[0])
    cols = T.nearest_indices(mask.shape[1], shape[1])
    return mask[rows[:, None], cols[None, :]]


# Masked average pooling ---------------------------------------------------------

def masked_average(features: Tensor, region: np.ndarray) -> Tensor:
    """Mean feature vector over the pixels where ``region`` is True; [D]."""
    region = np.asarray(region, dtype=bool)
    if features.shape[1:] != region.shape:
        raise ShapeError(f"Features {features.shape} and mask {region.shape} sizes differ")
    count = int(region.sum())
    if count == 0:
        raise EpisodeError("Cannot pool over an empty region")
    weighted = T.mul(features, region[None].astype(np.float64))
    return T.div(T.sum(weighted, axis=(1, 2)), float(count))


def _pool_label(features: Sequence[Tensor], masks: Sequence[np.ndarray], label: int,
                dim: int) -> tuple[Tensor, bool]:
    pooled = [masked_average(f, m == label) for f, m in zip(features, masks) if (m == label).any()]
    if not pooled:
        return Tensor(np.zeros(dim)), False
    if len(pooled) == 1:
        return pooled[0], True
    return T.mean(T.stack(pooled), axis=0), True


def compute_prototypes(features: Sequence[Tensor], masks: Sequence[np.ndarray], way: int) -> PrototypeSet:
    """Masked average pooling of support features into C + 1 prototypes.

    Each image contributes the spatial mean of its features over the pixels
    of a label; a prototype is the unweighted mean of those per-image means
    over the images where the label occurs. Background pools label 0 only,
    so pixels marked ``UNKNOWN_LABEL`` never influence a prototype.

    Args:
        features: One [D, H', W'] feature map per support image
        masks: Label masks at feature resolution, aligned with ``features``
        way: Number of episode classes C

    Returns:
        PrototypeSet; labels without any pixel are marked invalid

    Raises:
        ShapeError: If features and masks are not aligned
    """
    if len(features) != len(masks) or not features:
        raise ShapeError(f"Got {len(features)} feature maps for {len(masks)} masks")
    dim = features[0].shape[0]
    masks = [np.asarray(m) for m in masks]
    background, bg_ok = _pool_label(features, masks, 0, dim)
    foreground, valid = [], [bg_ok]
    for label in range(1, way + 1):
        proto, ok = _pool_label(features, masks, label, dim)
        foreground.append(proto)
        valid.append(ok)
    if not all(valid):
        missing = [j for j, ok in enumerate(valid) if not ok]
        logger.debug(f"No pixels to pool for labels {missing}; prototypes marked invalid")
    return PrototypeSet(tuple(foreground), background, tuple(valid))


# Metric ---------------------------------------------------------------------------

def distance(u, v, cfg: MetricConfig = MetricConfig()) -> float:
    """d(u, v): 1 - cos(u, v) in cosine mode, |u - v|^2 in squared-Euclidean mode."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"distance needs two equal-length vectors, got {u.shape} and {v.shape}")
    if cfg.distance is Distance.SQUARED_EUCLIDEAN:
        diff = u - v
        return float(diff @ diff)
    cos = float(u @ v) / (float(np.sqrt(u @ u) * np.sqrt(v @ v)) + T.COSINE_EPS)
    return 1.0 - cos


def distance_map(features: Tensor, prototype: Tensor, cfg: MetricConfig) -> Tensor:
    """d(F(x, y), p) at every location of a [D, H', W'] feature map."""
    if cfg.distance is Distance.SQUARED_EUCLIDEAN:
        return T.squared_distance_map(features, prototype)
    return T.sub(1.0, T.cosine_similarity_map(features, prototype))


def _softmax_over(features: Tensor, prototypes: Sequence[tuple[int, Tensor]], channels: int,
                  cfg: MetricConfig) -> Tensor:
    # softmax of -alpha * d over the given prototypes, scattered into ``channels`` slots
    spatial = features.shape[1:]
    logits = [T.mul(distance_map(features, p, cfg), -cfg.alpha) for _, p in prototypes]
    probs = T.softmax(T.stack(logits), axis=0)
    slots: list[Tensor] = [Tensor(np.zeros(spatial)) for _ in range(channels)]
    for position, (channel, _) in enumerate(prototypes):
        slots[channel] = T.index(probs, position)
    return T.stack(slots)


def probability_map(query_features: Tensor, protos: PrototypeSet,
                    cfg: MetricConfig = MetricConfig()) -> ProbabilityMap:
    """Softmax over -alpha * d(F_q(x, y), p_j) for the valid prototypes.

    Raises:
        EpisodeError: If no prototype is valid
        ShapeError: If the feature and prototype dimensions differ
    """
    if query_features.ndim != 3 or query_features.shape[0] != protos.dim:
        raise ShapeError(f"Query features {query_features.shape} do not match prototype dim {protos.dim}")
    labels = protos.valid_labels()
    if not labels:
        raise EpisodeError("probability_map needs at least one valid prototype")
    tensor = _softmax_over(query_features, [(j, protos.prototype(j)) for j in labels],
                           protos.way + 1, cfg)
    return ProbabilityMap(tensor, protos.valid)


def predict_mask(probs: ProbabilityMap | Tensor) -> np.ndarray:
    """Per-location argmax; ties go to the lower label, background first."""
    data = probs.tensor.data if isinstance(probs, ProbabilityMap) else probs.data
    return np.argmax(data, axis=0).astype(np.uint8)


def segment_query(support_features: Sequence[Tensor], support_masks: Sequence[np.ndarray],
                  query_features: Tensor, way: int,
                  cfg: MetricConfig = MetricConfig()) -> tuple[PrototypeSet, ProbabilityMap]:
    """Prototypes from the support set, then the query probability map."""
    protos = compute_prototypes(support_features, support_masks, way)
    return protos, probability_map(query_features, protos, cfg)


# Losses ---------------------------------------------------------------------------

def _nll(probs: Tensor, labels: np.ndarray, known: np.ndarray | None = None) -> Tensor:
    # mean of -log(max(p[label], 1e-12)) over known locations
    picked = T.log(T.clip_min(T.gather_channel(probs, np.where(labels == UNKNOWN_LABEL, 0, labels)), LOG_CLAMP))
    if known is None:
        return T.neg(T.mean(picked))
    count = int(known.sum())
    return T.div(T.neg(T.sum(T.mul(picked, known.astype(np.float64)))), float(count))


def seg_loss(probs: ProbabilityMap, gt: np.ndarray) -> Tensor:
    """Cross-entropy of the query probability map against its mask.

    Pixels labelled ``UNKNOWN_LABEL`` are ignored; the mean runs over the
    remaining locations.

    Raises:
        ShapeError: If the mask and map sizes differ
        EpisodeError: If a ground-truth label has no valid prototype
    """
    gt = np.asarray(gt)
    if gt.shape != probs.shape[1:]:
        raise ShapeError(f"Ground truth {gt.shape} does not match probability map {probs.shape}")
    known = gt != UNKNOWN_LABEL
    present = np.unique(gt[known])
    if present.size and present.max() >= len(probs.valid):
        raise EpisodeError(f"Ground-truth labels {present.tolist()} exceed {len(probs.valid) - 1} classes")
    missing = [int(j) for j in present if not probs.valid[j]]
    if missing:
        raise EpisodeError(f"Ground-truth labels {missing} have no valid prototype")
    if not known.any():
        raise EpisodeError("Ground-truth mask has no known pixel")
    return _nll(probs.tensor, gt, None if known.all() else known)


def par_loss(support_features: Sequence[Sequence[Tensor]], support_masks: Sequence[Sequence[np.ndarray]],
             query_features: Tensor, predicted_query_mask: np.ndarray, way: int,
             cfg: MetricConfig = MetricConfig()) -> Tensor:
    """Prototype alignment loss: segment every support image with query prototypes.

    Query prototypes are pooled from ``query_features`` under the hard
    predicted mask, so no gradient flows through the prediction itself.
    Support image (c, k) is then classified against the pair
    {background, class c} of query prototypes and scored against its own
    mask; labels outside {0, c} are ignored. A missing query prototype leaves
    the softmax over the remaining one; with both missing the image costs the
    constant clamp penalty -log(1e-12) everywhere.

    Args:
        support_features: ``support_features[c][k]`` is the [D, H', W'] map
            of the k-th support image of slot c + 1
        support_masks: Matching masks at feature resolution
        query_features: [D, H', W'] query feature map
        predicted_query_mask: Hard prediction at feature resolution
        way: Number of episode classes C
        cfg: Metric configuration

    Returns:
        Scalar mean loss over the C * K support images
    """
    if len(support_features) != way or len(support_masks) != way:
        raise ShapeError(f"par_loss expects {way} support slots, got {len(support_features)}")
    query_protos = compute_prototypes([query_features], [np.asarray(predicted_query_mask)], way)

    losses = []
    for slot, (slot_features, slot_masks) in enumerate(zip(support_features, support_masks), start=1):
        pair = [(channel, query_protos.prototype(label))
                for channel, label in ((0, 0), (1, slot)) if query_protos.valid[label]]
        for features, mask in zip(slot_features, slot_masks):
            mask = np.asarray(mask)
            known = (mask == 0) | (mask == slot)
            if not known.any():
                continue
            if pair:
                probs = _softmax_over(features, pair, 2, cfg)
            else:
                probs = Tensor(np.zeros((2,) + features.shape[1:]))
            local = (mask == slot).astype(np.int64)
            losses.append(_nll(probs, local, None if known.all() else known))
    if not losses:
        raise EpisodeError("par_loss found no labelled support pixel")
    if not query_protos.valid[0] or not any(query_protos.valid[1:]):
        logger.debug(f"Query prediction covers labels {query_protos.valid_labels()} only")
    return T.mean(T.stack(losses))


def total_loss(l_seg, l_par, lambda_par: float):
    """L_seg + lambda * L_PAR; lambda = 0 returns ``l_seg`` untouched.

    Raises:
        ConfigError: If lambda is negative
    """
    if lambda_par < 0:
        raise ConfigError(f"lambda_par must be >= 0, got: {lambda_par}")
    if lambda_par == 0:
        return l_seg
    return T.add(l_seg, T.mul(l_par, lambda_par))
