"""C-way K-shot episodes over disjoint seen / unseen class splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from shapes import SHAPE_NAMES, ShapeDatasetConfig, render_instance, render_scene
from validation import ConfigError, EpisodeError, validate_range, validate_split_part

logger = logging.getLogger(__name__)

BACKGROUND = 0

__all__ = [
    "AnnotatedImage", "ClassSplit", "Episode", "SplitConfig", "ShapeDatasetConfig",
    "episode_seed", "fold_split", "hflip_episode", "make_split", "render_instance",
    "render_scene", "sample_episode", "split_from_config",
]


class AnnotatedImage(NamedTuple):
    image: np.ndarray  # [C, H, W] float64
    mask: np.ndarray   # [H, W] integer labels


@dataclass(frozen=True)
class SplitConfig:
    unseen_fraction: float = 1.0 / 3.0
    split_seed: int = 0
    fold: int = -1
    folds: int = 4

    def validate(self) -> "SplitConfig":
        validate_range("dataset.unseen_fraction", self.unseen_fraction, 0.0, 1.0,
                       include_low=False, include_high=False)
        if self.fold >= 0:
            validate_range("dataset.fold", self.fold, 0, self.folds - 1)
        return self


@dataclass(frozen=True)
class ClassSplit:
    seen: frozenset[int]
    unseen: frozenset[int]

    def __post_init__(self):
        overlap = self.seen & self.unseen
        if overlap:
            raise ConfigError(f"Seen and unseen classes overlap: {sorted(overlap)}")

    def part(self, name: str) -> tuple[int, ...]:
        validate_split_part(name)
        return tuple(sorted(self.seen if name == "seen" else self.unseen))

    def describe(self) -> str:
        def names(ids):
            return ", ".join(f"{i}:{SHAPE_NAMES[i]}" for i in sorted(ids))
        return f"seen=[{names(self.seen)}] unseen=[{names(self.unseen)}]"


@dataclass(frozen=True)
class Episode:
    """One C-way K-shot task.

    ``support[c][k]`` is the k-th annotated image of episode slot c; its mask
    uses episode-local labels (0 background, c + 1 foreground). Query masks
    use the same labels.
    """
    classes: tuple[int, ...]
    support: tuple[tuple[AnnotatedImage, ...], ...]
    query: tuple[AnnotatedImage, ...]
    seed: int = 0

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return len(self.support[0]) if self.support else 0

    def support_pairs(self) -> list[AnnotatedImage]:
        return [pair for slot in self.support for pair in slot]

    def validate(self) -> "Episode":
        """Check the episode invariants.

        Raises:
            EpisodeError: If any invariant is violated
        """
        if len(self.support) != self.way:
            raise EpisodeError(f"Episode has {len(self.support)} support slots for {self.way} classes")
        if len(set(self.classes)) != self.way:
            raise EpisodeError(f"Episode classes repeat: {self.classes}")
        for slot, pairs in enumerate(self.support, start=1):
            if len(pairs) != self.shot:
                raise EpisodeError(f"Support slot {slot} has {len(pairs)} shots, expected {self.shot}")
            for pair in pairs:
                _check_pair(pair, self.way)
                if not (pair.mask == slot).any():
                    raise EpisodeError(f"Support mask for slot {slot} has no pixel of its class")
        for pair in self.query:
            _check_pair(pair, self.way)
        return self


def _check_pair(pair: AnnotatedImage, way: int) -> None:
    if pair.image.shape[1:] != pair.mask.shape:
        raise EpisodeError(f"Image {pair.image.shape} and mask {pair.mask.shape} sizes differ")
    labels = np.unique(pair.mask)
    if labels.min() < 0 or labels.max() > way:
        raise EpisodeError(f"Mask labels {labels.tolist()} outside [0, {way}]")


def episode_seed(master: int, index: int, stream: int = 0) -> int:
    """Counter-based sub-seed: a pure function of (master, index, stream)."""
    return int(np.random.SeedSequence([master, index, stream]).generate_state(1, dtype=np.uint64)[0] >> 1)


def make_split(num_classes: int, unseen_fraction: float, seed: int) -> ClassSplit:
    """Partition class ids into disjoint seen / unseen sets.

    Args:
        num_classes: Total number of classes
        unseen_fraction: Share of classes held out as unseen
        seed: Seed of the permutation that chooses the unseen classes

    Returns:
        ClassSplit whose parts cover all classes

    Raises:
        ConfigError: If the fraction leaves either part empty
    """
    if not 0.0 < unseen_fraction < 1.0:
        raise ConfigError(f"unseen_fraction must be in (0, 1), got: {unseen_fraction}")
    n_unseen = int(round(num_classes * unseen_fraction))
    if n_unseen < 1 or n_unseen >= num_classes:
        raise ConfigError(
            f"unseen_fraction {unseen_fraction} gives {n_unseen} unseen of {num_classes} classes"
        )
    order = np.random.default_rng(seed).permutation(num_classes)
    unseen = frozenset(int(c) for c in order[:n_unseen])
    seen = frozenset(range(num_classes)) - unseen
    return ClassSplit(seen=seen, unseen=unseen)


def fold_split(num_classes: int, folds: int, fold: int) -> ClassSplit:
    """Cross-validation split: fold ``fold`` of ``folds`` contiguous blocks is unseen."""
    if folds < 2 or not 0 <= fold < folds:
        raise ConfigError(f"fold must be in [0, {folds}) with folds >= 2, got fold={fold}")
    bounds = np.linspace(0, num_classes, folds + 1).round().astype(int)
    unseen = frozenset(range(bounds[fold], bounds[fold + 1]))
    if not unseen:
        raise ConfigError(f"Fold {fold} of {folds} over {num_classes} classes is empty")
    return ClassSplit(seen=frozenset(range(num_classes)) - unseen, unseen=unseen)


def split_from_config(dataset: ShapeDatasetConfig, split: SplitConfig) -> ClassSplit:
    if split.fold >= 0:
        return fold_split(dataset.num_classes, split.folds, split.fold)
    return make_split(dataset.num_classes, split.unseen_fraction, split.split_seed)


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 62))


def sample_episode(split_part: Iterable[int], way: int, shot: int, n_query: int, rng_seed: int,
                   config: ShapeDatasetConfig = ShapeDatasetConfig(), support_instances: int = 1,
                   balanced_query: bool = False, grid: int = 1) -> Episode:
    """Sample one C-way K-shot episode from the given classes.

    Args:
        split_part: Class ids the episode may use (one part of a ClassSplit)
        way: Number of classes C
        shot: Support images per class K
        n_query: Number of query images, each holding one instance of one
            episode class
        rng_seed: Seed; the episode is a pure function of it
        config: Dataset configuration
        support_instances: Instances of the class drawn in every support image
        balanced_query: Assign query i to slot i mod C instead of a random slot
        grid: Feature stride every support mask must stay visible at, so
            each support class keeps a prototype after downsampling

    Returns:
        A validated Episode with episode-local labels 1..C

    Raises:
        EpisodeError: If the split part has fewer than ``way`` classes
    """
    pool = sorted(set(split_part))
    if way < 1 or shot < 1 or n_query < 1:
        raise EpisodeError(f"way, shot and n_query must be >= 1, got {way}, {shot}, {n_query}")
    if len(pool) < way:
        raise EpisodeError(f"Split part has {len(pool)} classes, need at least {way}")

    rng = np.random.default_rng(rng_seed)
    classes = tuple(int(c) for c in rng.choice(pool, size=way, replace=False))

    support = []
    for slot, class_id in enumerate(classes, start=1):
        pairs = []
        for _ in range(shot):
            image, mask = render_scene(class_id, _seed(rng), config, instances=support_instances, grid=grid)
            pairs.append(AnnotatedImage(image, mask * slot))
        support.append(tuple(pairs))

    query = []
    for i in range(n_query):
        slot = (i % way) + 1 if balanced_query else int(rng.integers(way)) + 1
        image, mask = render_instance(classes[slot - 1], _seed(rng), config)
        query.append(AnnotatedImage(image, mask * slot))

    return Episode(classes, tuple(support), tuple(query), seed=rng_seed).validate()


def hflip_episode(episode: Episode, rng_seed: int, probability: float = 0.5) -> Episode:
    """Flip each image and its mask horizontally with the given probability."""
    rng = np.random.default_rng(rng_seed)

    def maybe_flip(pair: AnnotatedImage) -> AnnotatedImage:
        if rng.random() < probability:
            return AnnotatedImage(pair.image[:, :, ::-1].copy(), pair.mask[:, ::-1].copy())
        return pair

    support = tuple(tuple(maybe_flip(p) for p in slot) for slot in episode.support)
    query = tuple(maybe_flip(p) for p in episode.query)
    return Episode(episode.classes, support, query, episode.seed)
