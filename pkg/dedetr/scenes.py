"""
dedetr - Synthetic scenes.

Detection scenes rendered directly in feature space: every object paints its
class signature onto the pyramid level whose stride matches its size, over
Gaussian noise. Deterministic in (spec.seed, index).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import read_tensor_records, write_tensor_records
from .errors import ConfigError, ContractError
from .models import Box, BoxFormat, LabelSet, SceneSpec
from .sampling import FeatureMap, FeaturePyramid
from .tensor import Tensor

logger = logging.getLogger(__name__)

SIGNATURE_SEED = 7919
MAX_PLACEMENT_TRIES = 50
MANIFEST_NAME = "manifest.json"


@dataclass
class Scene:
    """One synthetic image: raw pyramid, ground-truth labels, painted level per object."""
    index: int
    pyramid: FeaturePyramid
    labels: LabelSet
    object_levels: list

    def labels_for(self, num_queries: int) -> LabelSet:
        """The same foreground, padded to the model's query count."""
        return LabelSet(list(self.labels.foreground), num_queries, self.labels.num_classes)


def class_signature(class_id: int, channels: int) -> np.ndarray:
    """Fixed unit-norm feature vector of a class."""
    vec = np.random.default_rng([SIGNATURE_SEED, class_id]).normal(size=channels)
    return vec / np.linalg.norm(vec)


def select_level(size_px: float, strides: Sequence[int]) -> int:
    """Level whose stride best matches an object of the given pixel size (4 cells across)."""
    scores = [abs(math.log2(size_px / (4.0 * s))) for s in strides]
    return int(np.argmin(scores))


def footprint(box: Box, height: int, width: int) -> tuple:
    """
    Cells of an H x W grid covered by a box and their bump weights.

    A cell is covered when its centre lies inside the box; the weight tapers
    linearly from 1 at the box centre to 0.25 at the corners. A box too small
    to cover any centre paints the single nearest cell at weight 1.

    Returns:
        (rows, cols, weights) arrays
    """
    cx, cy, w, h = box.values
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    in_x = np.nonzero(np.abs(xs - cx) <= 0.5 * w)[0]
    in_y = np.nonzero(np.abs(ys - cy) <= 0.5 * h)[0]
    if in_x.size == 0 or in_y.size == 0:
        j = min(int(cx * width), width - 1)
        i = min(int(cy * height), height - 1)
        return np.array([i]), np.array([j]), np.array([1.0])
    rx = np.abs(xs[in_x] - cx) / (0.5 * w)
    ry = np.abs(ys[in_y] - cy) / (0.5 * h)
    weights = np.outer(1.0 - 0.5 * ry, 1.0 - 0.5 * rx)
    rows, cols = np.meshgrid(in_y, in_x, indexing="ij")
    return rows.ravel(), cols.ravel(), weights.ravel()


def gen_scene(spec: SceneSpec, index: int) -> Scene:
    """
    Generate scene `index` of the dataset described by spec.

    The object count is drawn uniformly from 1..max_objects and always kept.
    Objects painted on the same level avoid sharing a footprint cell: a
    colliding placement redraws size and position, and only after
    MAX_PLACEMENT_TRIES collisions is the last draw painted over its
    neighbours.
    """
    rng = np.random.default_rng([spec.seed, index])
    sides = [spec.image_size // s for s in spec.strides]
    grids = [np.zeros((n, n, spec.channels)) for n in sides]
    occupied = [np.zeros((n, n), dtype=bool) for n in sides]
    lo, hi = spec.scale_range

    foreground, levels = [], []
    for _ in range(int(rng.integers(1, spec.max_objects + 1))):
        class_id = int(rng.integers(spec.num_classes))
        w, h = rng.uniform(lo, hi, size=2)
        for attempt in range(MAX_PLACEMENT_TRIES):
            if attempt:
                w, h = rng.uniform(lo, hi, size=2)
            level = select_level(math.sqrt(w * h) * spec.image_size, spec.strides)
            n = sides[level]
            cx = rng.uniform(0.5 * w, 1.0 - 0.5 * w)
            cy = rng.uniform(0.5 * h, 1.0 - 0.5 * h)
            box = Box((cx, cy, w, h), BoxFormat.CXCYWH)
            rows, cols, weights = footprint(box, n, n)
            if not occupied[level][rows, cols].any():
                break
        else:
            logger.debug("scene %d: class-%d object overlaps after %d placements",
                         index, class_id, MAX_PLACEMENT_TRIES)
        occupied[level][rows, cols] = True
        grids[level][rows, cols] += (spec.amplitude * weights)[:, None] \
            * class_signature(class_id, spec.channels)
        foreground.append((class_id, box))
        levels.append(level)

    if spec.noise_std > 0:
        for grid in grids:
            grid += rng.normal(0.0, spec.noise_std, size=grid.shape)
    pyramid = FeaturePyramid(
        [FeatureMap(Tensor(g), s) for g, s in zip(grids, spec.strides)], spec.image_size
    )
    labels = LabelSet(foreground, spec.max_objects, spec.num_classes)
    return Scene(index, pyramid, labels, levels)


def gen_dataset(spec: SceneSpec, count: int, start: int = 0) -> list:
    """Scenes start .. start+count-1 in index order."""
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1, got {count}")
    scenes = [gen_scene(spec, start + i) for i in range(count)]
    logger.debug("generated %d scenes from index %d", count, start)
    return scenes


def subsample(dataset: Sequence[Scene], ratio: float, seed: int) -> list:
    """ceil(len * ratio) scenes drawn without replacement, kept in dataset order."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"subsample ratio must be in (0, 1], got {ratio}")
    count = len(dataset)
    keep = math.ceil(count * ratio - 1e-9)
    if keep >= count:
        return list(dataset)
    picked = np.sort(np.random.default_rng(seed).choice(count, size=keep, replace=False))
    return [dataset[i] for i in picked]


def oracle_classify(scene: Scene, spec: SceneSpec) -> list:
    """Class of each object from footprint means against every class signature."""
    signatures = np.stack([class_signature(c, spec.channels) for c in range(spec.num_classes)])
    predicted = []
    for (_, box), level in zip(scene.labels.foreground, scene.object_levels):
        fmap = scene.pyramid.levels[level]
        rows, cols, _ = footprint(box, fmap.height, fmap.width)
        mean = fmap.values.data[rows, cols].mean(axis=0)
        predicted.append(int(np.argmax(signatures @ mean)))
    return predicted


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def export_scenes(scenes: Sequence[Scene], directory, spec: SceneSpec) -> Path:
    """Write manifest.json plus one tensor-record blob per scene."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        blob = f"scene_{scene.index:06d}.bin"
        with open(out / blob, "wb") as fh:
            write_tensor_records(fh, [(f"level{i}", fmap.values.data)
                                      for i, fmap in enumerate(scene.pyramid.levels)])
        entries.append({
            "index": scene.index,
            "blob": blob,
            "labels": [{"class_id": c, "box": list(b.values)} for c, b in scene.labels.foreground],
            "object_levels": scene.object_levels,
        })
    manifest = {"spec": asdict(spec), "scenes": entries}
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    logger.info("exported %d scenes to %s", len(entries), out)
    return out / MANIFEST_NAME


def import_scenes(directory) -> tuple:
    """
    Read scenes written by export_scenes.

    Returns:
        (SceneSpec, list of Scene); feature values come back at float32 precision
    """
    root = Path(directory)
    try:
        with open(root / MANIFEST_NAME, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read scene manifest in {root}: {exc}") from exc
    spec = SceneSpec(**manifest["spec"])
    scenes = []
    for entry in manifest["scenes"]:
        with open(root / entry["blob"], "rb") as fh:
            records = read_tensor_records(fh)
        levels = [FeatureMap(Tensor(records[f"level{i}"]), stride)
                  for i, stride in enumerate(spec.strides)]
        foreground = [(item["class_id"], Box(tuple(item["box"]), BoxFormat.CXCYWH))
                      for item in entry["labels"]]
        scenes.append(Scene(entry["index"], FeaturePyramid(levels, spec.image_size),
                            LabelSet(foreground, spec.max_objects, spec.num_classes),
                            list(entry["object_levels"])))
    return spec, scenes
