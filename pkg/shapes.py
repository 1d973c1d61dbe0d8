"""Synthetic shape images: twelve geometric families rasterised with Pillow.

Each family is drawn in local unit coordinates (x right, y down, extent
about [-1, 1]), rotated by a family-specific random angle, scaled by a random
radius and moved to a random centre. The mask is the rasterised shape; the
image is a foreground intensity inside the mask, a background intensity
outside, plus Gaussian noise, clipped to [0, 1] and quantised to 8 bits so
images survive a PGM round trip exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from validation import EpisodeError, validate_interval, validate_positive, validate_range

logger = logging.getLogger(__name__)

MAX_RENDER_ATTEMPTS = 200
MAX_SHAPE_FRACTION = 0.5


@dataclass(frozen=True)
class ShapeDatasetConfig:
    num_classes: int = 12
    image_size: int = 32
    noise_std: float = 0.1
    fg_intensity_range: tuple[float, float] = (0.6, 1.0)
    bg_intensity_range: tuple[float, float] = (0.0, 0.4)
    min_shape_fraction: float = 0.05
    min_radius: float = 0.2
    max_radius: float = 0.38

    def validate(self) -> "ShapeDatasetConfig":
        validate_range("dataset.num_classes", self.num_classes, 2, len(SHAPE_FAMILIES))
        validate_positive("dataset.image_size", self.image_size)
        validate_range("dataset.noise_std", self.noise_std, 0.0, 1.0)
        validate_interval("dataset.fg_intensity_range", self.fg_intensity_range)
        validate_interval("dataset.bg_intensity_range", self.bg_intensity_range)
        validate_range("dataset.min_shape_fraction", self.min_shape_fraction, 0.0, 0.5, include_low=False)
        validate_range("dataset.min_radius", self.min_radius, 0.0, 0.5, include_low=False)
        validate_range("dataset.max_radius", self.max_radius, self.min_radius, 0.5)
        return self


def _star(points: int = 5, inner: float = 0.45) -> list[tuple[float, float]]:
    vertices = []
    for i in range(2 * points):
        radius = 1.0 if i % 2 == 0 else inner
        angle = -math.pi / 2 + i * math.pi / points
        vertices.append((radius * math.cos(angle), radius * math.sin(angle)))
    return vertices


def _rect(x0: float, y0: float, x1: float, y1: float) -> list[tuple[float, float]]:
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _checker_cells() -> list[list[tuple[float, float]]]:
    step = 2.0 / 3.0
    cells = []
    for row in range(3):
        for col in range(3):
            if (row + col) % 2 == 0:
                x0, y0 = -1.0 + col * step, -1.0 + row * step
                cells.append(_rect(x0, y0, x0 + step, y0 + step))
    return cells


@dataclass(frozen=True)
class ShapeFamily:
    name: str
    max_rotation: float
    polygons: tuple[tuple[tuple[float, float], ...], ...] = ()
    ellipse: bool = False
    hole: float = 0.0


SHAPE_FAMILIES: tuple[ShapeFamily, ...] = (
    ShapeFamily("disk", 0.0, ellipse=True),
    ShapeFamily("square", 15.0, (tuple(_rect(-0.8, -0.8, 0.8, 0.8)),)),
    ShapeFamily("triangle", 20.0, (((0.0, -1.0), (0.866, 0.5), (-0.866, 0.5)),)),
    ShapeFamily("ring", 0.0, ellipse=True, hole=0.55),
    ShapeFamily("cross", 20.0, ((
        (-0.3, -1.0), (0.3, -1.0), (0.3, -0.3), (1.0, -0.3), (1.0, 0.3), (0.3, 0.3),
        (0.3, 1.0), (-0.3, 1.0), (-0.3, 0.3), (-1.0, 0.3), (-1.0, -0.3), (-0.3, -0.3)),)),
    ShapeFamily("star", 36.0, (tuple(_star()),)),
    ShapeFamily("horizontal_bar", 10.0, (tuple(_rect(-1.0, -0.25, 1.0, 0.25)),)),
    ShapeFamily("vertical_bar", 10.0, (tuple(_rect(-0.25, -1.0, 0.25, 1.0)),)),
    ShapeFamily("l_shape", 15.0, ((
        (-0.8, -1.0), (-0.2, -1.0), (-0.2, 0.4), (0.8, 0.4), (0.8, 1.0), (-0.8, 1.0)),)),
    ShapeFamily("t_shape", 15.0, ((
        (-1.0, -1.0), (1.0, -1.0), (1.0, -0.4), (0.3, -0.4), (0.3, 1.0), (-0.3, 1.0),
        (-0.3, -0.4), (-1.0, -0.4)),)),
    ShapeFamily("diamond", 10.0, (((0.0, -1.0), (0.7, 0.0), (0.0, 1.0), (-0.7, 0.0)),)),
    ShapeFamily("checker_patch", 15.0, tuple(tuple(c) for c in _checker_cells())),
)

SHAPE_NAMES = tuple(f.name for f in SHAPE_FAMILIES)


def _draw_family(family: ShapeFamily, size: int, cx: float, cy: float, radius: float,
                 angle_deg: float) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if family.ellipse:
        draw.ellipse((cx - radius, cy - radius, cx + radius, cy + radius), fill=1)
        if family.hole:
            inner = radius * family.hole
            draw.ellipse((cx - inner, cy - inner, cx + inner, cy + inner), fill=0)
    else:
        cos_a, sin_a = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
        for polygon in family.polygons:
            points = [(cx + radius * (x * cos_a - y * sin_a), cy + radius * (x * sin_a + y * cos_a))
                      for x, y in polygon]
            draw.polygon(points, fill=1)
    return np.asarray(canvas, dtype=bool)


def _sample_instance(class_id: int, rng: np.random.Generator, config: ShapeDatasetConfig) -> np.ndarray:
    family = SHAPE_FAMILIES[class_id]
    size = config.image_size
    area = size * size
    for attempt in range(MAX_RENDER_ATTEMPTS):
        radius = rng.uniform(config.min_radius, config.max_radius) * size
        cx = rng.uniform(radius, size - radius)
        cy = rng.uniform(radius, size - radius)
        angle = rng.uniform(-family.max_rotation, family.max_rotation)
        mask = _draw_family(family, size, cx, cy, radius, angle)
        fraction = mask.sum() / area
        if config.min_shape_fraction <= fraction <= MAX_SHAPE_FRACTION:
            return mask
    raise EpisodeError(
        f"Could not render a {family.name} covering at least {config.min_shape_fraction:.0%} "
        f"of a {size}x{size} image in {MAX_RENDER_ATTEMPTS} attempts"
    )


def visible_on_grid(mask: np.ndarray, grid: int) -> bool:
    """Whether the top-left samples of every grid x grid cell hit the shape, flipped or not."""
    mask = np.asarray(mask, dtype=bool)
    return bool(mask[::grid, ::grid].any() and mask[:, ::-1][::grid, ::grid].any())


def render_scene(class_id: int, rng_seed: int, config: ShapeDatasetConfig,
                 instances: int = 1, grid: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Render one image holding ``instances`` shapes of one class.

    Args:
        class_id: Shape family index in [0, num_classes)
        rng_seed: Seed; the output is a pure function of it
        config: Dataset configuration
        instances: Number of (possibly overlapping) instances
        grid: Feature stride the mask must survive; scenes whose shape
            misses every grid sample (in either horizontal orientation)
            are redrawn

    Returns:
        (image [1, H, W] float64 in [0, 1], mask [H, W] uint8 with 1 = shape)

    Raises:
        EpisodeError: If class_id is out of range or no instance fits
    """
    if not 0 <= class_id < config.num_classes:
        raise EpisodeError(f"class_id must be in [0, {config.num_classes}), got: {class_id}")
    if instances < 1:
        raise EpisodeError(f"instances must be >= 1, got: {instances}")
    if grid < 1:
        raise EpisodeError(f"grid must be >= 1, got: {grid}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_RENDER_ATTEMPTS):
        mask = np.zeros((config.image_size, config.image_size), dtype=bool)
        for _ in range(instances):
            mask |= _sample_instance(class_id, rng, config)
        if grid == 1 or visible_on_grid(mask, grid):
            break
    else:
        raise EpisodeError(f"Could not render a {SHAPE_NAMES[class_id]} visible on a stride-{grid} grid")

    fg = rng.uniform(*config.fg_intensity_range)
    bg = rng.uniform(*config.bg_intensity_range)
    image = np.where(mask, fg, bg)
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image[None, :, :], mask.astype(np.uint8)


def render_instance(class_id: int, rng_seed: int, config: ShapeDatasetConfig,
                    grid: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Render a single instance of one shape family; see ``render_scene``."""
    return render_scene(class_id, rng_seed, config, instances=1, grid=grid)
