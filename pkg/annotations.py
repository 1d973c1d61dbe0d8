"""Weak support annotations derived automatically from dense masks.

Scribbles are short 4-connected random walks inside the (eroded) region of
each class and of the background; every other pixel is ``UNKNOWN_LABEL``.
Bounding boxes fill the tight box of one randomly chosen connected component
with its class label, so background pixels in the box corners leak into the
foreground prototype.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from prototypes import UNKNOWN_LABEL, PrototypeSet, compute_prototypes, downsample_mask, downsample_weak_mask
from tensor import Tensor
from validation import EpisodeError, ShapeError, validate_annotation_kind, validate_non_negative, validate_positive

logger = logging.getLogger(__name__)

# up, down, left, right
NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class AnnotationConfig:
    kind: str = "dense"
    strokes: int = 3
    stroke_length: int = 20
    bbox_instances: int = 1

    def validate(self) -> "AnnotationConfig":
        validate_annotation_kind(self.kind)
        validate_non_negative("annotations.strokes", self.strokes)
        validate_positive("annotations.stroke_length", self.stroke_length)
        validate_positive("annotations.bbox_instances", self.bbox_instances)
        return self


@dataclass(frozen=True)
class WeakAnnotation:
    kind: str
    mask: np.ndarray

    @property
    def known(self) -> np.ndarray:
        return self.mask != UNKNOWN_LABEL


def _require_foreground(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"Annotation source mask must be 2-D, got {mask.shape}")
    if not ((mask > 0) & (mask != UNKNOWN_LABEL)).any():
        raise EpisodeError("Cannot derive a weak annotation from a mask without foreground")
    return mask


def _stroke_region(region: np.ndarray, label: int) -> np.ndarray:
    eroded = ndimage.binary_erosion(region, structure=FOUR_CONNECTED)
    if eroded.any():
        return eroded
    logger.debug(f"Erosion empties the region of label {label}; drawing on the full region")
    return region


def _random_walk(region: np.ndarray, length: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(region)
    start = int(rng.integers(rows.size))
    path = [(int(rows[start]), int(cols[start]))]
    height, width = region.shape
    for _ in range(length - 1):
        r, c = path[-1]
        options = [(r + dr, c + dc) for dr, dc in NEIGHBOURS
                   if 0 <= r + dr < height and 0 <= c + dc < width and region[r + dr, c + dc]]
        if not options:
            break
        path.append(options[int(rng.integers(len(options)))])
    return path


def derive_scribble(mask: np.ndarray, strokes: int = 3, rng_seed: int = 0,
                    stroke_length: int = 20) -> WeakAnnotation:
    """Scribble annotation: ``strokes`` walks per class plus one background walk.

    Args:
        mask: Dense label mask with at least one foreground pixel
        strokes: Walks drawn inside every foreground class present
        rng_seed: Seed; the output is a pure function of it
        stroke_length: Maximum pixels per walk

    Returns:
        WeakAnnotation whose unmarked pixels are ``UNKNOWN_LABEL``

    Raises:
        EpisodeError: If the mask has no foreground
    """
    mask = _require_foreground(mask)
    validate_non_negative("strokes", strokes)
    validate_positive("stroke_length", stroke_length)
    rng = np.random.default_rng(rng_seed)
    out = np.full(mask.shape, UNKNOWN_LABEL, dtype=np.uint8)

    labels = [int(j) for j in np.unique(mask) if 0 < j != UNKNOWN_LABEL]
    for label in labels:
        region = _stroke_region(mask == label, label)
        for _ in range(strokes):
            for r, c in _random_walk(region, stroke_length, rng):
                out[r, c] = label

    background = mask == 0
    if background.any():
        for r, c in _random_walk(_stroke_region(background, 0), stroke_length, rng):
            out[r, c] = 0
    return WeakAnnotation("scribble", out)


def connected_components(mask: np.ndarray) -> list[tuple[int, tuple[slice, slice]]]:
    """(label, bounding slices) of every 4-connected component, per class, in label order."""
    components = []
    for label in (int(j) for j in np.unique(mask) if 0 < j != UNKNOWN_LABEL):
        labelled, _ = ndimage.label(mask == label, structure=FOUR_CONNECTED)
        components.extend((label, box) for box in ndimage.find_objects(labelled))
    return components


def derive_bbox(mask: np.ndarray, rng_seed: int = 0, instances: int = 1) -> WeakAnnotation:
    """Bounding-box annotation of randomly chosen connected components.

    Args:
        mask: Dense label mask with at least one foreground pixel
        rng_seed: Seed for picking components uniformly
        instances: Number of distinct components to box (capped at the
            number available)

    Returns:
        WeakAnnotation: tight boxes filled with their class label, the rest
        background

    Raises:
        EpisodeError: If the mask has no foreground
    """
    mask = _require_foreground(mask)
    components = connected_components(mask)
    rng = np.random.default_rng(rng_seed)
    count = min(instances, len(components))
    chosen = np.sort(rng.choice(len(components), size=count, replace=False))
    out = np.zeros(mask.shape, dtype=np.uint8)
    for i in chosen:
        label, box = components[int(i)]
        out[box] = label
    return WeakAnnotation("bbox", out)


def derive_weak(kind: str, mask: np.ndarray, rng_seed: int,
                config: AnnotationConfig = AnnotationConfig()) -> WeakAnnotation:
    """Dispatch to the annotation generator named by ``kind``."""
    validate_annotation_kind(kind)
    if kind == "scribble":
        return derive_scribble(mask, config.strokes, rng_seed, config.stroke_length)
    if kind == "bbox":
        return derive_bbox(mask, rng_seed, config.bbox_instances)
    return WeakAnnotation("dense", np.asarray(mask).copy())


def pool_with_weak(features: Sequence[Tensor], weak: Sequence[WeakAnnotation], way: int) -> PrototypeSet:
    """Prototypes from weakly annotated support images.

    Masks are brought to feature resolution first; unknown pixels pool into
    neither foreground nor background.

    Raises:
        ShapeError: If a mask size is not a multiple of its feature size
    """
    if len(features) != len(weak):
        raise ShapeError(f"Got {len(features)} feature maps for {len(weak)} annotations")
    masks = []
    for f, annotation in zip(features, weak):
        height = annotation.mask.shape[0]
        factor = height // f.shape[1] if f.shape[1] else 0
        if factor < 1 or f.shape[1] * factor != height:
            raise ShapeError(f"Annotation {annotation.mask.shape} does not fit features {f.shape}")
        resize = downsample_mask if annotation.kind == "dense" else downsample_weak_mask
        masks.append(resize(annotation.mask, factor))
    return compute_prototypes(features, masks, way)
