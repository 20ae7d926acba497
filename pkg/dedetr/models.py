"""
dedetr - Data Models.

Pure data records shared across modules: boxes, detections, label sets,
assignments, scene specs and evaluation results. Validation only, no numerics.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import ConfigError, ContractError, GeometryError


class BoxFormat(str, Enum):
    """Box parameterisation tag."""
    CXCYWH = "cxcywh"   # normalised to the image, all components in [0, 1]
    XYXY = "xyxy"       # absolute pixels (or any common unit)


@dataclass(frozen=True)
class Box:
    """Four reals plus the parameterisation they are expressed in."""
    values: tuple
    fmt: BoxFormat = BoxFormat.CXCYWH

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"box needs four finite reals, got {self.values}")
        if self.fmt == BoxFormat.CXCYWH:
            if not all(0.0 <= v <= 1.0 for v in vals):
                raise GeometryError(f"cxcywh box components must lie in [0, 1], got {vals}")
            if vals[2] <= 0.0 or vals[3] <= 0.0:
                raise GeometryError(f"cxcywh box must have w > 0 and h > 0, got {vals}")
        elif vals[0] > vals[2] or vals[1] > vals[3]:
            raise GeometryError(f"xyxy box needs x1 <= x2 and y1 <= y2, got {vals}")


@dataclass(frozen=True)
class Detection:
    """A scored, classified box emitted by the model."""
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score must be in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ContractError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class LabelEntry:
    """One foreground label; source_index points back into the original label set."""
    source_index: int
    class_id: int
    box: Box


@dataclass
class LabelSet:
    """M ground-truth (class, box) pairs, implicitly padded with no-object to pad_to."""
    foreground: list            # list[tuple[int, Box]]
    pad_to: int
    num_classes: Optional[int] = None

    def __post_init__(self):
        if len(self.foreground) > self.pad_to:
            raise ContractError(
                f"label set has {len(self.foreground)} objects but only {self.pad_to} slots"
            )
        for class_id, box in self.foreground:
            if class_id < 0 or (self.num_classes is not None and class_id >= self.num_classes):
                raise ContractError(f"class_id {class_id} out of range")
            if box.fmt != BoxFormat.CXCYWH:
                raise GeometryError("label boxes must be cxcywh-normalised")

    @property
    def num_objects(self) -> int:
        return len(self.foreground)


@dataclass
class AugmentedLabelSet:
    """Foreground entries after repetition; entries of one source stay contiguous."""
    entries: list               # list[LabelEntry]
    pad_to: int
    strategy: str = "none"      # "none", "repeat" or "ratio"
    parameter: float = 1.0      # R for "repeat", r for "ratio"
    num_sources: int = 0

    def __post_init__(self):
        if len(self.entries) > self.pad_to:
            raise ContractError(
                f"{len(self.entries)} augmented entries exceed {self.pad_to} slots"
            )
        finished = set()
        current = None
        for entry in self.entries:
            if not 0 <= entry.source_index < self.num_sources:
                raise ContractError(f"source_index {entry.source_index} out of range")
            if entry.source_index != current:
                if entry.source_index in finished:
                    raise ContractError("entries of one source must be contiguous")
                if current is not None:
                    finished.add(current)
                current = entry.source_index

    def counts(self) -> list:
        """Number of entries per source label."""
        counts = [0] * self.num_sources
        for entry in self.entries:
            counts[entry.source_index] += 1
        return counts


@dataclass
class Assignment:
    """Injective map from label-entry index to prediction index."""
    pairs: dict                 # dict[int, int]
    total_cost: float

    def __post_init__(self):
        if len(set(self.pairs.values())) != len(self.pairs):
            raise ContractError("assignment is not injective")

    def rows(self) -> list:
        return sorted(self.pairs)

    def cols(self) -> list:
        return [self.pairs[r] for r in self.rows()]


@dataclass
class SceneSpec:
    """Recipe for deterministic synthetic detection scenes."""
    image_size: int = 256
    num_classes: int = 6
    max_objects: int = 8
    scale_range: tuple = (0.05, 0.4)
    noise_std: float = 0.1
    channels: int = 32
    strides: tuple = (8, 16, 32)
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.strides = tuple(self.strides)
        if self.max_objects < 1:
            raise ConfigError(f"max_objects must be >= 1, got {self.max_objects}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"scale_range must lie within (0, 1), got {self.scale_range}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if any(self.image_size % s for s in self.strides):
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by every stride {self.strides}"
            )


@dataclass
class EvalResult:
    """COCO-style AP summary for one model on one scene set."""
    ap: float
    ap50: float
    ap75: float
    per_class_ap: dict = field(default_factory=dict)   # class_id -> AP@[.50:.95]
    num_scenes: int = 0
    num_ground_truth: int = 0
    num_detections: int = 0

    def __post_init__(self):
        for name in ("ap", "ap50", "ap75"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {value}")
