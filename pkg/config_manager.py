"""Configuration management for protoseg runs (INI files with strict keys)."""
import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from annotations import AnnotationConfig
from encoder import BlockConfig, EncoderConfig
from episodes import SplitConfig, split_from_config, ClassSplit
from evaluation import EvalConfig
from shapes import ShapeDatasetConfig
from trainer import TrainConfig
from validation import ConfigError, parse_bool

logger = logging.getLogger(__name__)

CONFIG_ENV = "PROTOSEG_CONFIG"
DEFAULT_CONFIG_NAME = "protoseg.ini"
ECHO_NAME = "config.ini"

# INI section -> RunConfig attributes whose fields it holds
SECTIONS: Dict[str, tuple] = {
    "dataset": ("dataset", "split"),
    "encoder": ("encoder",),
    "train": ("train",),
    "eval": ("eval",),
    "annotations": ("annotations",),
}


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a command, grouped the way the INI file groups them."""
    dataset: ShapeDatasetConfig = field(default_factory=ShapeDatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    annotations: AnnotationConfig = field(default_factory=AnnotationConfig)

    def validate(self) -> "RunConfig":
        """Validate every section and the constraints between them.

        Raises:
            ConfigError: On the first invalid value
        """
        self.dataset.validate()
        self.split.validate()
        self.encoder.validate(self.dataset.image_size)
        self.train.validate()
        self.eval.validate()
        self.annotations.validate()
        split = self.class_split()
        if len(split.seen) < self.train.way:
            raise ConfigError(f"train.way={self.train.way} exceeds the {len(split.seen)} seen classes")
        eval_part = split.part(self.eval.split_part)
        if len(eval_part) < self.eval.way:
            raise ConfigError(f"eval.way={self.eval.way} exceeds the {len(eval_part)} {self.eval.split_part} classes")
        return self

    def class_split(self) -> ClassSplit:
        return split_from_config(self.dataset, self.split)

    def replace(self, **sections: Any) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _coerce(name: str, raw: Any, default: Any) -> Any:
    """Convert a raw INI string (or a typed override) to the type of ``default``."""
    if isinstance(raw, str):
        raw = raw.strip().strip('"\'')
    try:
        if isinstance(default, bool):
            return parse_bool(name, raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()] if isinstance(raw, str) else list(raw)
            if default and isinstance(default[0], BlockConfig):
                return tuple(b if isinstance(b, BlockConfig) else BlockConfig.parse(b) for b in items)
            return tuple(float(v) for v in items)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} has an invalid value: {raw!r}")


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def section_fields(run_config: RunConfig) -> Dict[str, Dict[str, Any]]:
    """Current values per INI section."""
    sections: Dict[str, Dict[str, Any]] = {}
    for section, attributes in SECTIONS.items():
        values: Dict[str, Any] = {}
        for attribute in attributes:
            obj = getattr(run_config, attribute)
            for f in dataclasses.fields(obj):
                values[f.name] = getattr(obj, f.name)
        sections[section] = values
    return sections


def apply_values(base: RunConfig, values: Dict[str, Any]) -> RunConfig:
    """Apply ``section.key -> value`` settings to a RunConfig.

    Raises:
        ConfigError: On an unknown section or key, or a value of the wrong type
    """
    grouped: Dict[str, Dict[str, Any]] = {}
    for dotted, raw in values.items():
        if "." not in dotted:
            raise ConfigError(f"Config key must look like section.key, got: {dotted}")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        grouped.setdefault(section, {})[key.replace("-", "_")] = raw

    updated: Dict[str, Any] = {}
    for section, settings in grouped.items():
        remaining = dict(settings)
        for attribute in SECTIONS[section]:
            obj = updated.get(attribute, getattr(base, attribute))
            names = {f.name for f in dataclasses.fields(obj)}
            changes = {k: _coerce(f"{section}.{k}", remaining.pop(k), getattr(obj, k))
                       for k in list(remaining) if k in names}
            updated[attribute] = dataclasses.replace(obj, **changes)
        if remaining:
            raise ConfigError(f"Unknown key(s) in [{section}]: {sorted(remaining)}")
    return dataclasses.replace(base, **updated)


def to_ini(run_config: RunConfig) -> str:
    """Render a RunConfig as INI text that ``RunConfigManager`` reads back unchanged."""
    lines = []
    for section, values in section_fields(run_config).items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format(value)}" for key, value in values.items())
        lines.append("")
    return "\n".join(lines)


def echo_config(run_config: RunConfig, out_dir: str | Path) -> Path:
    """Write the resolved configuration into an output directory for provenance."""
    path = Path(out_dir) / ECHO_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_ini(run_config), encoding="utf-8")
    return path


class RunConfigManager:
    """Loads protoseg settings from an INI file."""

    def __init__(self, config_path: Optional[str] = None):
        """Initialize config manager.

        Args:
            config_path: Path to an INI file (default: PROTOSEG_CONFIG, then
                ./protoseg.ini when present)

        Raises:
            FileNotFoundError: If an explicit config_path does not exist
            ConfigError: If the file is not valid INI
        """
        self.config = configparser.ConfigParser(interpolation=None)
        if config_path is not None and not Path(config_path).expanduser().is_file():
            raise FileNotFoundError(f"Config file not found: {Path(config_path).expanduser()}")
        self.config_path = Path(config_path).expanduser() if config_path else self._find_config()
        self._load_config()

    def _find_config(self) -> Optional[Path]:
        env_config = os.environ.get(CONFIG_ENV)
        if env_config:
            config_path = Path(env_config).expanduser()
            if config_path.exists():
                return config_path
            logger.warning(f"{CONFIG_ENV} points to a missing file: {config_path}")
        default_path = Path.cwd() / DEFAULT_CONFIG_NAME
        return default_path if default_path.exists() else None

    def _load_config(self) -> None:
        if self.config_path is None:
            logger.debug("No config file found; using defaults")
            return
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                self.config.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"Cannot parse config file {self.config_path}: {e}")
        logger.debug(f"Loaded config from {self.config_path}")

    def get_file_values(self) -> Dict[str, str]:
        """All ``section.key -> raw string`` pairs from the file."""
        return {f"{section}.{key}": value
                for section in self.config.sections()
                for key, value in self.config[section].items()}

    def merge_with_overrides(self, overrides: Dict[str, Any]) -> Dict[str, Any]:
        """Merge file values with ``section.key`` overrides; overrides win."""
        return {**self.get_file_values(), **{k: v for k, v in overrides.items() if v is not None}}

    def build(self, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Resolve the RunConfig: defaults, then the file, then overrides.

        Raises:
            ConfigError: On unknown keys or invalid values
        """
        merged = self.merge_with_overrides(overrides or {})
        return apply_values(RunConfig(), merged).validate()


# Global config manager instance
_config_manager: Optional[RunConfigManager] = None


def get_config_manager(config_path: Optional[str] = None) -> RunConfigManager:
    """Get or create the global config manager instance.

    Args:
        config_path: Optional path to an INI file

    Returns:
        RunConfigManager instance
    """
    global _config_manager

    if _config_manager is None or config_path:
        _config_manager = RunConfigManager(config_path)

    return _config_manager
