"""
dedetr - Feature sampling.

Sine positional embeddings, half-pixel bilinear interpolation, RoIAlign with one
sample per bin centre, and assembly of each query's sparse multi-scale
key/value sequence from the boxes predicted by the previous decoder layer.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

POS_TEMPERATURE = 10000.0


@dataclass
class FeatureMap:
    """One pyramid level: values [H, W, D] on a grid of stride-pixel cells."""
    values: Tensor
    stride: int

    def __post_init__(self):
        if len(self.values.dims) != 3:
            raise ShapeError(f"feature map values must be [H, W, D], got {self.values.dims}")

    @property
    def height(self) -> int:
        return self.values.dims[0]

    @property
    def width(self) -> int:
        return self.values.dims[1]

    @property
    def channels(self) -> int:
        return self.values.dims[2]


@dataclass
class FeaturePyramid:
    """Levels ordered fine to coarse, plus the encoded coarsest level once embedded."""
    levels: list
    image_size: int
    encoded_top: Optional[Tensor] = None    # [S^L, D]
    pos_top: Optional[Tensor] = None        # [S^L, D]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a pyramid needs at least one level")
        for level in self.levels:
            if level.height * level.stride != self.image_size or \
                    level.width * level.stride != self.image_size:
                raise ShapeError(
                    f"level of stride {level.stride} has {level.height}x{level.width} cells, "
                    f"which does not tile a {self.image_size}px image"
                )
        if self.encoded_top is not None:
            top = self.levels[-1]
            expected = (top.height * top.width, top.channels)
            if self.encoded_top.dims != expected:
                raise ShapeError(f"encoded_top must be {expected}, got {self.encoded_top.dims}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> FeatureMap:
        return self.levels[-1]


@dataclass
class SparseKV:
    """Per-query key/value sequences and their positional embeddings, [N, L*K*K, D]."""
    keys_values: Tensor
    pos: Tensor

    def __post_init__(self):
        if self.keys_values.dims != self.pos.dims:
            raise ShapeError(
                f"keys_values {self.keys_values.dims} and pos {self.pos.dims} differ"
            )

    @property
    def num_queries(self) -> int:
        return self.keys_values.dims[0]

    @property
    def length(self) -> int:
        return self.keys_values.dims[1]


def sine_pos_embed(coords, dim: int, temperature: float = POS_TEMPERATURE) -> Tensor:
    """
    Sine/cosine embedding of normalised (x, y) points.

    The first dim/2 channels encode x and the last dim/2 encode y; within each
    half, even channels hold sin and odd channels cos at geometric frequencies.

    Args:
        coords: [n, 2] array of (x, y) in [0, 1]
        dim: Embedding width, divisible by 4

    Returns:
        Constant tensor [n, dim]
    """
    if dim % 4:
        raise ConfigError(f"positional embedding width must be divisible by 4, got {dim}")
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    half = dim // 2
    freq = temperature ** (2.0 * (np.arange(half) // 2) / half)
    halves = []
    for axis in range(2):
        phase = pts[:, axis:axis + 1] * (2.0 * math.pi) / freq
        emb = np.empty_like(phase)
        emb[:, 0::2] = np.sin(phase[:, 0::2])
        emb[:, 1::2] = np.cos(phase[:, 1::2])
        halves.append(emb)
    return Tensor(np.concatenate(halves, axis=1))


def grid_points(height: int, width: int) -> np.ndarray:
    """Normalised cell-centre coordinates of an H x W grid, row-major -> [H*W, 2]."""
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([(jj.ravel() + 0.5) / width, (ii.ravel() + 0.5) / height], axis=1)


def _bilinear_taps(height: int, width: int, xs: np.ndarray, ys: np.ndarray):
    """
    Four-neighbour interpolation taps for points in continuous cell coordinates.

    Cell (i, j) has its centre at (j + 0.5, i + 0.5). Returns (point, flat_cell,
    weight) arrays with out-of-map neighbours dropped (zero padding).
    """
    u = np.asarray(xs, dtype=np.float64) - 0.5
    v = np.asarray(ys, dtype=np.float64) - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fx = u - j0
    fy = v - i0
    point = np.arange(u.size)
    rows, cols, weights = [], [], []
    for di, dj, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < height) & (jj >= 0) & (jj < width) & (w != 0)
        rows.append(point[ok])
        cols.append(ii[ok] * width + jj[ok])
        weights.append(w[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)


def interpolation_matrix(height: int, width: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Dense [P, H*W] matrix whose rows bilinearly blend the grid at each point."""
    rows, cols, weights = _bilinear_taps(height, width, xs, ys)
    mat = np.zeros((np.size(xs), height * width))
    np.add.at(mat, (rows, cols), weights)
    return mat


def bilinear_sample(fmap: FeatureMap, x: float, y: float) -> np.ndarray:
    """Bilinear value of the map at continuous cell coordinate (x, y) -> [D]."""
    rows, cols, weights = _bilinear_taps(fmap.height, fmap.width, np.array([x]), np.array([y]))
    flat = fmap.values.data.reshape(-1, fmap.channels)
    return (weights[:, None] * flat[cols]).sum(axis=0) if cols.size else np.zeros(fmap.channels)


def roi_sample_points(boxes: np.ndarray, resolution: int) -> np.ndarray:
    """
    Normalised image coordinates of the K x K bin centres of each box.

    Args:
        boxes: [N, 4] cxcywh-normalised
        resolution: K

    Returns:
        [N, K*K, 2] (x, y) points, bins in row-major order
    """
    if resolution < 1:
        raise ContractError(f"RoI resolution must be >= 1, got {resolution}")
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    offsets = (np.arange(resolution) + 0.5) / resolution
    x1 = b[:, 0] - 0.5 * b[:, 2]
    y1 = b[:, 1] - 0.5 * b[:, 3]
    xs = x1[:, None] + offsets[None, :] * b[:, 2:3]          # [N, K]
    ys = y1[:, None] + offsets[None, :] * b[:, 3:4]
    grid_x = np.broadcast_to(xs[:, None, :], (b.shape[0], resolution, resolution))
    grid_y = np.broadcast_to(ys[:, :, None], (b.shape[0], resolution, resolution))
    return np.stack([grid_x, grid_y], axis=-1).reshape(b.shape[0], resolution * resolution, 2)


def roi_align(fmap: FeatureMap, boxes: np.ndarray, resolution: int,
              points: Optional[np.ndarray] = None) -> Tensor:
    """
    RoIAlign with one bilinear sample at each bin centre.

    Boxes are treated as constants; the result is differentiable with respect
    to the map values.

    Args:
        fmap: Level to sample
        boxes: [N, 4] cxcywh-normalised boxes
        resolution: K, bins per side
        points: Precomputed roi_sample_points(boxes, K), optional

    Returns:
        [N, K*K, D]
    """
    if points is None:
        points = roi_sample_points(boxes, resolution)
    n = points.shape[0]
    # the level spans image_size / stride cells per side
    cell_x = points[..., 0].ravel() * fmap.width
    cell_y = points[..., 1].ravel() * fmap.height
    weights = Tensor(interpolation_matrix(fmap.height, fmap.width, cell_x, cell_y))
    flat = T.reshape(fmap.values, (fmap.height * fmap.width, fmap.channels))
    return T.reshape(T.matmul(weights, flat), (n, resolution * resolution, fmap.channels))


def flatten_embed(fmap: FeatureMap, projection: Callable[[Tensor], Tensor]) -> Tensor:
    """Flatten [H, W, C] row-major into [H*W, C] and project channels to D."""
    flat = T.reshape(fmap.values, (fmap.height * fmap.width, fmap.channels))
    return projection(flat)


def build_multiscale_kv(pyramid: FeaturePyramid, boxes: np.ndarray, resolution: int,
                        levels_used: Sequence[int]) -> SparseKV:
    """
    Concatenate RoIAlign samples from the chosen levels into per-query sequences.

    The coarsest level is sampled from the encoder output, finer levels from
    their embedded (unencoded) features. Positional embeddings are evaluated
    analytically at every sample point.

    Args:
        pyramid: Embedded pyramid with encoded_top set
        boxes: [N, 4] cxcywh-normalised boxes from the previous layer
        resolution: K
        levels_used: Indices into pyramid.levels (0 = finest)

    Returns:
        SparseKV with second extent len(levels_used) * K * K
    """
    levels = list(levels_used)
    if not levels:
        raise ConfigError("levels_used must name at least one level")
    if any(not 0 <= lvl < pyramid.num_levels for lvl in levels):
        raise ConfigError(f"levels_used {levels} out of range for {pyramid.num_levels} levels")
    if pyramid.encoded_top is None:
        raise ContractError("pyramid must be embedded and encoded before sparse sampling")

    points = roi_sample_points(boxes, resolution)
    n = points.shape[0]
    top_index = pyramid.num_levels - 1
    dim = pyramid.top.channels
    sampled = []
    for lvl in levels:
        fmap = pyramid.levels[lvl]
        if lvl == top_index:
            fmap = FeatureMap(T.reshape(pyramid.encoded_top, (fmap.height, fmap.width, dim)),
                              fmap.stride)
        sampled.append(roi_align(fmap, boxes, resolution, points=points))

    pos = sine_pos_embed(points.reshape(-1, 2), dim).data.reshape(n, resolution * resolution, dim)
    kv = sampled[0] if len(sampled) == 1 else T.concat(sampled, axis=1)
    logger.debug("sparse kv: %d queries x %d samples from levels %s", n, kv.dims[1], levels)
    return SparseKV(kv, Tensor(np.concatenate([pos] * len(levels), axis=1)))
