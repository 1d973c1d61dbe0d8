"""Tests for synthetic shapes, class splits and episode sampling."""
import numpy as np
import pytest

import trainer
from encoder import BlockConfig, EncoderConfig
from episodes import (
    ClassSplit,
    SplitConfig,
    episode_seed,
    fold_split,
    hflip_episode,
    make_split,
    sample_episode,
    split_from_config,
)
from shapes import SHAPE_FAMILIES, SHAPE_NAMES, ShapeDatasetConfig, render_instance, render_scene, visible_on_grid
from trainer import StepResult, TrainConfig
from validation import ConfigError, EpisodeError

DATASET = ShapeDatasetConfig()


def test_twelve_distinct_families():
    """Twelve uniquely named shape families."""
    assert len(SHAPE_FAMILIES) == 12
    assert len(set(SHAPE_NAMES)) == 12


@pytest.mark.parametrize("class_id", range(12))
def test_render_every_family(class_id):
    """Every family renders a nonempty mask within the size bounds."""
    image, mask = render_instance(class_id, 11, DATASET)
    assert image.shape == (1, 32, 32)
    assert mask.shape == (32, 32)
    assert mask.dtype == np.uint8
    fraction = mask.mean()
    assert DATASET.min_shape_fraction <= fraction <= 0.5
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_render_is_pure_function_of_seed():
    """Same seed, same pixels; different seeds differ."""
    a = render_instance(5, 42, DATASET)
    b = render_instance(5, 42, DATASET)
    c = render_instance(5, 43, DATASET)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_images_are_8bit_quantised():
    """Pixel values are multiples of 1/255."""
    image, _ = render_instance(0, 3, DATASET)
    np.testing.assert_allclose(image * 255.0, np.rint(image * 255.0), atol=1e-9)


def test_foreground_brighter_without_noise():
    """With zero noise the foreground intensity exceeds the background."""
    cfg = ShapeDatasetConfig(noise_std=0.0)
    image, mask = render_instance(2, 0, cfg)
    assert image[0][mask == 1].min() > image[0][mask == 0].max()


def test_render_rejects_bad_class():
    """Test out-of-range class ids."""
    with pytest.raises(EpisodeError):
        render_instance(12, 0, DATASET)


def test_render_grid_visibility():
    """A grid-constrained scene survives stride sampling in both orientations."""
    for seed in range(20):
        _, mask = render_scene(6, seed, DATASET, grid=4)
        assert visible_on_grid(mask, 4)
        assert mask[::4, ::4].any()
        assert mask[:, ::-1][::4, ::4].any()


def test_multi_instance_scene():
    """A two-instance scene is still a binary mask of one class."""
    _, mask = render_scene(0, 9, DATASET, instances=2)
    assert set(np.unique(mask)) == {0, 1}
    assert mask.sum() >= DATASET.min_shape_fraction * 32 * 32


def test_make_split_disjoint_and_complete():
    """Seen and unseen parts partition the classes."""
    split = make_split(12, 1.0 / 3.0, seed=0)
    assert len(split.unseen) == 4
    assert split.seen | split.unseen == frozenset(range(12))
    assert not split.seen & split.unseen
    assert make_split(12, 1.0 / 3.0, seed=0) == split


def test_make_split_rejects_degenerate_fraction():
    """Test fractions that leave a part empty."""
    with pytest.raises(ConfigError):
        make_split(12, 0.0, 0)
    with pytest.raises(ConfigError):
        make_split(2, 0.1, 0)


def test_overlapping_split_rejected():
    """Test the disjointness invariant."""
    with pytest.raises(ConfigError, match="overlap"):
        ClassSplit(seen=frozenset({1, 2}), unseen=frozenset({2}))


def test_fold_split():
    """Folds cover every class exactly once as unseen."""
    unseen = [fold_split(12, 4, f).unseen for f in range(4)]
    assert [len(u) for u in unseen] == [3, 3, 3, 3]
    assert frozenset().union(*unseen) == frozenset(range(12))
    assert split_from_config(DATASET, SplitConfig(fold=1)) == fold_split(12, 4, 1)


def test_episode_seed_counter_based():
    """Sub-seeds depend on master, index and stream only."""
    assert episode_seed(0, 5) == episode_seed(0, 5)
    assert len({episode_seed(0, 5), episode_seed(0, 6), episode_seed(1, 5), episode_seed(0, 5, 1)}) == 4


def test_sample_episode_structure():
    """Episode labels, shapes and class membership."""
    split = make_split(12, 1.0 / 3.0, 0)
    seen = split.part("seen")
    episode = sample_episode(seen, way=2, shot=3, n_query=2, rng_seed=7, config=DATASET)
    assert episode.way == 2 and episode.shot == 3
    assert set(episode.classes) <= set(seen)
    for slot, pairs in enumerate(episode.support, start=1):
        for pair in pairs:
            assert set(np.unique(pair.mask)) == {0, slot}
    for query in episode.query:
        labels = set(np.unique(query.mask))
        assert labels <= {0, 1, 2} and len(labels) == 2


def test_sample_episode_deterministic():
    """Same seed, identical episode."""
    a = sample_episode(range(8), 1, 1, 1, 99)
    b = sample_episode(range(8), 1, 1, 1, 99)
    assert a.classes == b.classes
    np.testing.assert_array_equal(a.query[0].image, b.query[0].image)


def test_balanced_queries():
    """Balanced queries cycle through the episode slots."""
    episode = sample_episode(range(8), 3, 1, 6, 1, balanced_query=True)
    slots = [int(q.mask.max()) for q in episode.query]
    assert slots == [1, 2, 3, 1, 2, 3]


def test_sample_episode_needs_enough_classes():
    """Test a split part smaller than the way."""
    with pytest.raises(EpisodeError):
        sample_episode([0, 1], way=3, shot=1, n_query=1, rng_seed=0)


def test_hflip_flips_images_and_masks_together():
    """Flipped pairs stay aligned; probability 1 flips everything."""
    episode = sample_episode(range(8), 1, 1, 1, 4)
    flipped = hflip_episode(episode, 0, probability=1.0)
    np.testing.assert_array_equal(flipped.query[0].image, episode.query[0].image[:, :, ::-1])
    np.testing.assert_array_equal(flipped.query[0].mask, episode.query[0].mask[:, ::-1])
    untouched = hflip_episode(episode, 0, probability=0.0)
    np.testing.assert_array_equal(untouched.support[0][0].mask, episode.support[0][0].mask)
    flipped.validate()


SMALL = ShapeDatasetConfig(image_size=16)
STRIDE_TWO = EncoderConfig(blocks=(BlockConfig(4, 2, 1), BlockConfig(4, 1, 2)))


def _assert_episode_invariants(episode, classes, way, shot, n_query):
    assert episode.way == way and len(episode.support) == way
    assert len(set(episode.classes)) == way
    assert set(episode.classes) <= set(classes)
    assert len(episode.query) == n_query
    for slot, pairs in enumerate(episode.support, start=1):
        assert len(pairs) == shot
        for pair in pairs:
            assert (pair.mask == slot).any()
            assert set(np.unique(pair.mask)) <= {0, slot}
    for query in episode.query:
        assert set(np.unique(query.mask)) <= set(range(way + 1))


def test_sample_episode_invariants_over_many_seeds():
    """Way, shot, support foreground and label range hold for 1000 seeds."""
    split = make_split(12, 1.0 / 3.0, 0)
    for seed in range(1000):
        part = split.part("seen" if seed % 2 else "unseen")
        way, shot, n_query = 1 + seed % 3, 1 + (seed // 3) % 2, 1 + (seed // 6) % 2
        episode = sample_episode(part, way, shot, n_query, episode_seed(0, seed), SMALL)
        _assert_episode_invariants(episode, part, way, shot, n_query)


@pytest.mark.parametrize("split_config", [SplitConfig(), SplitConfig(split_seed=3), SplitConfig(fold=2)])
def test_train_stream_never_draws_unseen_classes(monkeypatch, split_config):
    """1000 training episodes only ever contain seen classes."""
    drawn = []

    def record(params, episode, cfg, state=None, iteration=0):
        drawn.append(episode)
        return StepResult(0.0, 0.0, params, state)

    monkeypatch.setattr(trainer, "train_episode", record)
    split = split_from_config(SMALL, split_config)
    cfg = TrainConfig(iterations=1000, way=2, log_every=0)
    trainer.train(cfg, split, SMALL, STRIDE_TWO, split_config=split_config)
    assert len(drawn) == 1000
    for episode in drawn:
        assert not set(episode.classes) & split.unseen
        _assert_episode_invariants(episode, split.seen, 2, 1, 1)
    assert set().union(*(e.classes for e in drawn)) == set(split.seen)
