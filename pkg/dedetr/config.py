"""
dedetr - Run configuration.

Nested dataclasses with desk-scale defaults, loaded from JSON or YAML files
(JSON parses as YAML) and validated on construction.
"""

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .models import SceneSpec

AUG_MODES = ("repeat", "ratio")
THREADS_ENV = "DEDETR_THREADS"


@dataclass
class ModelConfig:
    num_queries: int = 25
    hidden_dim: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 3
    num_classes: int = 6
    in_channels: int = 32
    ffn_dim: Optional[int] = None       # defaults to 4 * hidden_dim
    roi_resolution: int = 4
    num_levels: int = 3
    levels_used: tuple = (0, 1, 2)
    sparse_sampling: bool = True
    multiscale: bool = True
    label_aug: bool = True
    box_refine: bool = True

    def __post_init__(self):
        self.levels_used = tuple(int(lvl) for lvl in self.levels_used)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.hidden_dim
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.hidden_dim % 4:
            raise ConfigError(f"hidden_dim must be divisible by 4, got {self.hidden_dim}")
        if self.dec_layers < 1:
            raise ConfigError(f"dec_layers must be >= 1, got {self.dec_layers}")
        if self.enc_layers < 0:
            raise ConfigError(f"enc_layers must be >= 0, got {self.enc_layers}")
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be >= 1, got {self.num_queries}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.roi_resolution < 1:
            raise ConfigError(f"roi_resolution must be >= 1, got {self.roi_resolution}")
        if not self.levels_used:
            raise ConfigError("levels_used must name at least one level")
        if any(not 0 <= lvl < self.num_levels for lvl in self.levels_used):
            raise ConfigError(
                f"levels_used {self.levels_used} out of range for {self.num_levels} levels"
            )

    def sampled_levels(self, num_levels: int) -> list:
        """Levels feeding sparse cross-attention: all configured, or only the coarsest."""
        if self.multiscale:
            return [lvl for lvl in self.levels_used if lvl < num_levels]
        return [num_levels - 1]


@dataclass
class LossWeights:
    """Weights shared by the matching cost and the set loss."""
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    eos_coef: float = 0.1

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.eos_coef <= 1.0:
            raise ConfigError(f"eos_coef must be in (0, 1], got {self.eos_coef}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.cls * factor, self.l1 * factor, self.giou * factor, self.eos_coef)


@dataclass
class AugmentConfig:
    mode: str = "repeat"
    repeat: int = 2
    ratio: float = 0.25

    def __post_init__(self):
        if self.mode not in AUG_MODES:
            raise ConfigError(f"augment mode must be one of {AUG_MODES}, got '{self.mode}'")
        if self.repeat < 1:
            raise ConfigError(f"repeat must be >= 1, got {self.repeat}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    lr_drop_epoch: Optional[int] = None     # defaults to 0.8 * epochs
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    clip_max_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_drop_epoch is None:
            self.lr_drop_epoch = max(1, int(0.8 * self.epochs))


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_count: int = 200
    eval_count: int = 50
    subsample_ratio: float = 1.0

    def __post_init__(self):
        if self.train_count < 1 or self.eval_count < 1:
            raise ConfigError("train_count and eval_count must be >= 1")
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise ConfigError(f"subsample_ratio must be in (0, 1], got {self.subsample_ratio}")


@dataclass
class AblationConfig:
    ladder: Optional[str] = "components"
    grid: list = field(default_factory=list)    # [{"config_id": str, "overrides": {...}}]
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        for cell in self.grid:
            if not isinstance(cell, dict) or "config_id" not in cell:
                raise ConfigError(f"ablation grid cells need a config_id, got {cell!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    nms_threshold: float = 0.7
    seed: int = 0
    output_dir: str = "runs"
    config_id: str = "default"

    def __post_init__(self):
        scene = self.data.scene
        if self.model.num_classes != scene.num_classes:
            raise ConfigError(
                f"model.num_classes ({self.model.num_classes}) must equal "
                f"data.scene.num_classes ({scene.num_classes})"
            )
        if self.model.in_channels != scene.channels:
            raise ConfigError(
                f"model.in_channels ({self.model.in_channels}) must equal "
                f"data.scene.channels ({scene.channels})"
            )
        if self.model.num_levels != len(scene.strides):
            raise ConfigError(
                f"model.num_levels ({self.model.num_levels}) must equal the "
                f"{len(scene.strides)} scene strides"
            )
        if not 0.0 < self.nms_threshold <= 1.0:
            raise ConfigError(f"nms_threshold must be in (0, 1], got {self.nms_threshold}")
        if scene.max_objects > self.model.num_queries:
            raise ConfigError(
                f"max_objects ({scene.max_objects}) exceeds num_queries ({self.model.num_queries})"
            )
        if self.model.label_aug and self.augment.mode == "repeat":
            needed = self.augment.repeat * scene.max_objects
            if needed > self.model.num_queries:
                raise ConfigError(
                    f"repeat {self.augment.repeat} x max_objects {scene.max_objects} = {needed} "
                    f"exceeds num_queries {self.model.num_queries}; raise num_queries"
                )

    @property
    def label_aug(self) -> bool:
        return self.model.label_aug


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "ablation"): AblationConfig,
    (DataConfig, "scene"): SceneSpec,
}


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{path}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        nested = _NESTED.get((cls, name))
        kwargs[name] = _build(nested, value, f"{path}.{name}") if nested else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid value in '{path}': {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Build a validated RunConfig; missing keys take defaults."""
    return _build(RunConfig, raw, "config")


def config_to_dict(config: RunConfig) -> dict:
    """Plain JSON-serialisable form (tuples become lists when dumped)."""
    return asdict(config)


def deep_merge(base: dict, overrides: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def with_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """
    Copy of config with a nested override mapping applied and re-validated.

    An ffn_dim still at 4 * hidden_dim follows a hidden_dim override unless
    the overrides set ffn_dim themselves.
    """
    merged = deep_merge(config_to_dict(config), overrides)
    model_overrides = overrides.get("model")
    if (isinstance(model_overrides, dict) and "hidden_dim" in model_overrides
            and "ffn_dim" not in model_overrides
            and config.model.ffn_dim == 4 * config.model.hidden_dim):
        merged["model"]["ffn_dim"] = None
    return config_from_dict(merged)


def load_config(config_path=None) -> RunConfig:
    """
    Load a run configuration.

    Args:
        config_path: JSON or YAML file; defaults only when None

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: Missing file, unparsable content or invalid values
    """
    if config_path is None:
        return RunConfig()
    path = Path(config_path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            raw = yaml.safe_load(file) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def worker_count(default_cap: int = 4) -> int:
    """Ablation worker threads, capped by DEDETR_THREADS when set."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from exc
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
        return value
    return max(1, min(default_cap, os.cpu_count() or 1))
