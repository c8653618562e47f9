"""
Typed configuration for comal-lab.

Configuration lives in flat ``KEY=VALUE`` files (read with python-dotenv).
Every key maps onto exactly one field of the section dataclasses below;
``COMAL_<KEY>`` environment variables override file values.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values, load_dotenv

from modules.error_handler import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "COMAL_"

CLASS_NAMES = ("sky", "building", "road", "sidewalk", "vehicle", "pedestrian", "pole", "sign")
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_INDEX = 255

REGIMES = ("source-only", "entmin", "bimal", "comal")
TAU_FORMS = ("paper", "agreement", "bilateral")


@dataclass
class WorldConfig:
    height: int = 32
    width: int = 32
    tail_lambda: float = 1.0
    source_noise: float = 0.03
    target_noise: float = 0.08
    target_hue_shift: float = 40.0
    target_brightness: float = -0.1

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"world grid must be at least 8x8, got {self.height}x{self.width}")
        if not 0.0 <= self.tail_lambda <= 1.0:
            raise ConfigError(f"tail_lambda must lie in [0, 1], got {self.tail_lambda}")
        if self.source_noise < 0 or self.target_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES


@dataclass
class FlowConfig:
    flow_layers: int = 6
    flow_hidden: int = 64
    flow_scale_bound: float = 2.0
    smoothing: float = 0.02
    grid_stride: int = 2
    flow_epochs: int = 20
    flow_lr: float = 1e-3
    flow_batch_size: int = 16
    flow_clip: float = 100.0

    def __post_init__(self):
        if self.flow_layers < 1 or self.flow_hidden < 1:
            raise ConfigError("flow needs at least one layer and a positive hidden width")
        if self.flow_scale_bound <= 0:
            raise ConfigError(f"flow_scale_bound must be positive, got {self.flow_scale_bound}")
        if self.grid_stride < 1:
            raise ConfigError(f"grid_stride must be >= 1, got {self.grid_stride}")


@dataclass
class StructConfig:
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_hidden: int = 128
    struct_epochs: int = 20
    struct_lr: float = 1e-2
    struct_batch_size: int = 8
    struct_clip: float = 5.0
    min_mask_rate: float = 0.15

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 < self.min_mask_rate <= 1.0:
            raise ConfigError(f"min_mask_rate must lie in (0, 1], got {self.min_mask_rate}")


@dataclass
class LossConfig:
    lambda_bimal: float = 1e-3
    lambda_comal: float = 1e-3
    lambda_entropy: float = 1e-3
    pseudo_threshold: float = 0.9
    weight_clamp: float = 10.0
    qprime: str = "uniform"
    use_tau: bool = True
    tau_form: str = "bilateral"
    sigma1: float = 0.5
    sigma2: float = 0.5
    refresh_target_histogram: bool = False
    num_anchors: int = 1
    class_weighting: bool = True

    def __post_init__(self):
        if min(self.lambda_bimal, self.lambda_comal, self.lambda_entropy) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.5 <= self.pseudo_threshold < 1.0:
            raise ConfigError(f"pseudo_threshold must lie in [0.5, 1), got {self.pseudo_threshold}")
        if self.weight_clamp <= 0:
            raise ConfigError(f"weight_clamp must be positive, got {self.weight_clamp}")
        if self.tau_form not in TAU_FORMS:
            raise ConfigError(f"tau_form must be one of {TAU_FORMS}, got {self.tau_form!r}")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ConfigError("sigma1 and sigma2 must be positive")
        if self.num_anchors < 1:
            raise ConfigError(f"num_anchors must be >= 1, got {self.num_anchors}")
        self.qprime_vector(NUM_CLASSES)

    def qprime_vector(self, num_classes: int) -> np.ndarray:
        """Ideal class distribution: uniform, or an explicit normalised vector"""
        if self.qprime.strip().lower() == "uniform":
            return np.full(num_classes, 1.0 / num_classes)
        try:
            values = np.array([float(v) for v in self.qprime.split(",")])
        except ValueError:
            raise ConfigError(f"qprime must be 'uniform' or a comma-separated vector, got {self.qprime!r}") from None
        if values.shape != (num_classes,) or np.any(values < 0) or values.sum() <= 0:
            raise ConfigError(f"qprime needs {num_classes} non-negative entries with positive sum")
        return values / values.sum()


@dataclass
class TrainConfig:
    seed: int = 0
    regime: str = "source-only"
    warmup_epochs: int = 30
    adapt_epochs: int = 60
    batch_size: int = 8
    lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dtype: str = "float64"
    num_source: int = 512
    num_target: int = 512
    num_eval: int = 128
    workers: int = 4
    prefetch: int = 4
    tail_classes: Tuple[int, ...] = (5, 6, 7)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.warmup_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("optimizer settings must satisfy lr > 0, momentum >= 0, weight_decay >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if any(not 0 <= c < NUM_CLASSES for c in self.tail_classes):
            raise ConfigError(f"tail_classes must be class indices below {NUM_CLASSES}")


SECTIONS = ("world", "flow", "struct", "loss", "train")


@dataclass
class LabConfig:
    """All sections of a run configuration"""

    world: WorldConfig = field(default_factory=WorldConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    struct: StructConfig = field(default_factory=StructConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def flat(self) -> Dict[str, Any]:
        values = {}
        for section in SECTIONS:
            values.update(dataclasses.asdict(getattr(self, section)))
        return values

    def replace(self, **overrides) -> "LabConfig":
        """Copy with flat-key overrides applied (validated)"""
        return _apply(self, {k: v for k, v in overrides.items()}, coerce=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabConfig":
        try:
            return cls(**{name: _SECTION_TYPES[name](**_tuples(name, data.get(name, {}))) for name in SECTIONS})
        except TypeError as e:
            raise ConfigError(f"malformed configuration record: {e}") from None


_SECTION_TYPES = {"world": WorldConfig, "flow": FlowConfig, "struct": StructConfig, "loss": LossConfig, "train": TrainConfig}


def _tuples(section: str, values: Dict[str, Any]) -> Dict[str, Any]:
    # JSON round-trips tuples as lists
    defaults = _SECTION_TYPES[section]()
    return {k: tuple(v) if isinstance(getattr(defaults, k, None), tuple) else v for k, v in values.items()}


def _key_index() -> Dict[str, str]:
    index = {}
    for section, kind in _SECTION_TYPES.items():
        for f in dataclasses.fields(kind):
            index[f.name] = section
    return index


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot interpret {raw!r} as {type(default).__name__}") from None
    return text


def _apply(base: LabConfig, overrides: Dict[str, Any], coerce: bool = True) -> LabConfig:
    index = _key_index()
    grouped: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    for raw_key, raw_value in overrides.items():
        key = raw_key.strip().lower()
        if key not in index:
            raise ConfigError(f"unknown config key {raw_key!r}")
        section = index[key]
        default = getattr(getattr(base, section), key)
        grouped[section][key] = _coerce(key, raw_value, default) if coerce else raw_value

    sections = {name: dataclasses.replace(getattr(base, name), **grouped[name]) for name in SECTIONS}
    return LabConfig(**sections)


def load_config(path: Optional[Union[str, Path]] = None, env: bool = True, **overrides) -> LabConfig:
    """Read a flat KEY=VALUE file, then COMAL_* environment, then keyword overrides"""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})

    if env:
        load_dotenv()
        for name, value in os.environ.items():
            if name.startswith(ENV_PREFIX):
                values[name[len(ENV_PREFIX):]] = value

    values.update({k: str(v) if not isinstance(v, str) else v for k, v in overrides.items()})
    config = _apply(LabConfig(), values)
    logger.debug(f"loaded config {config_hash(config)} from {path or 'defaults'}")
    return config


def config_hash(obj: Any) -> str:
    """First 16 hex chars of SHA-256 over canonical JSON"""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_config(config: LabConfig, path: Union[str, Path]):
    """Write the flat KEY=VALUE form that load_config reads back"""
    lines = []
    for key, value in config.flat().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key.upper()}={value}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
