"""Small fully-convolutional feature extractor shared by support and query images."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

import tensor as T
from tensor import Tensor
from validation import ConfigError, ShapeError, validate_positive

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    """One conv -> relu -> maxpool block."""
    out_channels: int
    pool_stride: int = 2
    dilation: int = 1

    def __str__(self) -> str:
        return f"{self.out_channels}:{self.pool_stride}:{self.dilation}"

    @classmethod
    def parse(cls, text: str) -> "BlockConfig":
        """Parse ``out_channels:pool_stride:dilation``."""
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"Encoder block must look like out:stride:dilation, got: {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise ConfigError(f"Encoder block values must be integers, got: {text!r}")


DEFAULT_BLOCKS = (BlockConfig(16, 2, 1), BlockConfig(32, 2, 1), BlockConfig(32, 1, 2))


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    blocks: tuple[BlockConfig, ...] = field(default=DEFAULT_BLOCKS)
    kernel_size: int = 3

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def downsample_factor(self) -> int:
        return int(np.prod([b.pool_stride for b in self.blocks]))

    def validate(self, image_size: int | None = None) -> "EncoderConfig":
        """Check the configuration, optionally against an image side length.

        Raises:
            ConfigError: On a non-positive size or an indivisible image size
        """
        validate_positive("encoder.in_channels", self.in_channels)
        validate_positive("encoder.kernel_size", self.kernel_size)
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"encoder.kernel_size must be odd, got: {self.kernel_size}")
        if not self.blocks:
            raise ConfigError("encoder.blocks must name at least one block")
        for block in self.blocks:
            validate_positive("encoder block out_channels", block.out_channels)
            validate_positive("encoder block pool_stride", block.pool_stride)
            validate_positive("encoder block dilation", block.dilation)
        if image_size is not None and image_size % self.downsample_factor:
            raise ConfigError(
                f"Image size {image_size} is not divisible by the encoder downsample factor {self.downsample_factor}"
            )
        return self


@dataclass(frozen=True)
class EncoderParams:
    """Encoder weights as immutable tensors, in a stable ``block{i}.kernel/bias`` order."""
    config: EncoderConfig
    tensors: dict[str, Tensor]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: Mapping[str, np.ndarray]) -> "EncoderParams":
        expected = parameter_shapes(config)
        if list(arrays) != list(expected):
            raise ShapeError(f"Encoder parameter names {list(arrays)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeError(f"Parameter {name} has shape {arrays[name].shape}, config expects {shape}")
        return cls(config, {name: Tensor(arrays[name], requires_grad=True) for name in expected})


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    in_channels = config.in_channels
    k = config.kernel_size
    for i, block in enumerate(config.blocks):
        shapes[f"block{i}.kernel"] = (block.out_channels, in_channels, k, k)
        shapes[f"block{i}.bias"] = (block.out_channels,)
        in_channels = block.out_channels
    return shapes


def parameter_count(config: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """He initialisation: kernels ~ N(0, sqrt(2 / fan_in)), zero biases.

    Args:
        config: Encoder configuration
        seed: Seed for numpy's default generator

    Returns:
        Freshly initialised parameters
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".kernel"):
            fan_in = shape[1] * shape[2] * shape[3]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    logger.debug(f"Initialised encoder with {parameter_count(config)} parameters (seed {seed})")
    return EncoderParams.from_arrays(config, arrays)


def _pool_geometry(stride: int) -> tuple[int, int]:
    # stride-1 pools keep resolution with a 3x3 window
    if stride > 1:
        return stride, 0
    return 3, 1


def forward(params: EncoderParams, image: Tensor | np.ndarray) -> Tensor:
    """Embed one [in_channels, H, W] image into a [feature_dim, H/ds, W/ds] map.

    Raises:
        ShapeError: If the channel count is wrong or H, W are not divisible
            by the downsample factor
    """
    config = params.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[0] != config.in_channels:
        raise ShapeError(f"Encoder expects a [{config.in_channels}, H, W] image, got {x.shape}")
    height, width = x.shape[1:]
    ds = config.downsample_factor
    if height % ds or width % ds:
        raise ShapeError(f"Image size H={height}, W={width} is not divisible by downsample factor ds={ds}")

    k = config.kernel_size
    for i, block in enumerate(config.blocks):
        x = T.conv2d(x, params.tensors[f"block{i}.kernel"], params.tensors[f"block{i}.bias"],
                     stride=1, padding=block.dilation * (k - 1) // 2, dilation=block.dilation)
        x = T.relu(x)
        window, padding = _pool_geometry(block.pool_stride)
        x = T.maxpool2d(x, window, block.pool_stride, padding)
    return x
