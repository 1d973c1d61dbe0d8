"""Input validation utilities and the error types shared across protoseg."""
import math
from pathlib import Path
from typing import Any

ALLOWED_ANNOTATIONS = ["dense", "scribble", "bbox"]
ALLOWED_DISTANCES = ["cosine", "squared_euclidean"]
ALLOWED_SPLIT_PARTS = ["seen", "unseen"]


class ConfigError(ValueError):
    """Invalid or unknown configuration key or value."""


class ShapeError(ValueError):
    """Tensor or mask shapes that do not fit together."""


class EpisodeError(ValueError):
    """Malformed episode, mask or episode directory."""


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


class NumericalError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


def validate_positive(name: str, value: float) -> float:
    """Validate that a number is strictly positive.

    Args:
        name: Parameter name used in the error message
        value: Value to check

    Returns:
        The value unchanged

    Raises:
        ConfigError: If value is not > 0
    """
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got: {value}")
    return value


def validate_non_negative(name: str, value: float) -> float:
    """Validate that a number is >= 0."""
    if not value >= 0:
        raise ConfigError(f"{name} must be >= 0, got: {value}")
    return value


def validate_range(name: str, value: float, low: float, high: float,
                   include_low: bool = True, include_high: bool = True) -> float:
    """Validate that a number lies in an interval.

    Args:
        name: Parameter name used in the error message
        value: Value to check
        low: Lower bound
        high: Upper bound
        include_low: Whether the lower bound is allowed
        include_high: Whether the upper bound is allowed

    Returns:
        The value unchanged

    Raises:
        ConfigError: If value is outside the interval
    """
    above = value >= low if include_low else value > low
    below = value <= high if include_high else value < high
    if not (above and below) or (isinstance(value, float) and math.isnan(value)):
        left = "[" if include_low else "("
        right = "]" if include_high else ")"
        raise ConfigError(f"{name} must be in {left}{low}, {high}{right}, got: {value}")
    return value


def validate_interval(name: str, interval: tuple[float, float]) -> tuple[float, float]:
    """Validate an intensity interval inside [0, 1] with low <= high."""
    if len(interval) != 2:
        raise ConfigError(f"{name} must have exactly two values, got: {interval}")
    low, high = interval
    validate_range(f"{name}[0]", low, 0.0, 1.0)
    validate_range(f"{name}[1]", high, 0.0, 1.0)
    if low > high:
        raise ConfigError(f"{name} lower bound exceeds upper bound: {interval}")
    return (float(low), float(high))


def validate_choice(name: str, value: str, allowed: list[str]) -> str:
    """Validate that a string is one of a whitelist.

    Raises:
        ConfigError: If value is not in allowed
    """
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got: {value}")
    return value


def validate_annotation_kind(kind: str) -> str:
    """Validate a support annotation kind (dense, scribble or bbox)."""
    return validate_choice("annotation", kind, ALLOWED_ANNOTATIONS)


def validate_split_part(part: str) -> str:
    """Validate a split part name (seen or unseen)."""
    return validate_choice("split part", part, ALLOWED_SPLIT_PARTS)


def validate_output_dir(path: str | Path) -> Path:
    """Create an output directory if needed and make sure it is a directory.

    Args:
        path: Directory to create or reuse

    Returns:
        Resolved directory path

    Raises:
        OSError: If the path exists and is not a directory, or cannot be created
    """
    resolved = Path(path).expanduser().resolve()
    if resolved.exists() and not resolved.is_dir():
        raise NotADirectoryError(f"Output path is not a directory: {resolved}")
    resolved.mkdir(parents=True, exist_ok=True)
    return resolved


def validate_existing_file(path: str | Path) -> Path:
    """Resolve a path that must point to an existing regular file.

    Raises:
        FileNotFoundError: If the file does not exist
    """
    resolved = Path(path).expanduser().resolve()
    if not resolved.is_file():
        raise FileNotFoundError(f"File not found: {resolved}")
    return resolved


def validate_episode_dir(path: str | Path) -> Path:
    """Validate an episode directory written by ``pgm_utils.write_episode``.

    Raises:
        FileNotFoundError: If the directory does not exist
        EpisodeError: If the directory has no ``meta`` file
    """
    resolved = Path(path).expanduser().resolve()
    if not resolved.is_dir():
        raise FileNotFoundError(f"Episode directory not found: {resolved}")
    if not (resolved / "meta").is_file():
        raise EpisodeError(f"Not an episode directory (missing meta): {resolved}")
    return resolved


def parse_bool(name: str, value: Any) -> bool:
    """Parse a boolean the way git-style config files spell them."""
    if isinstance(value, bool):
        return value
    text = str(value).strip().strip('"\'').lower()
    if text in ("true", "yes", "on", "1"):
        return True
    if text in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{name} must be a boolean, got: {value}")
