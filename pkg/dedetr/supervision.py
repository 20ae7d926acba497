"""
dedetr - Set supervision.

Bipartite matching between (possibly augmented) label sets and per-layer
predictions, label augmentation by fixed repeat or fixed ratio, and the
deep-supervision set loss summed over decoder layers.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .config import AugmentConfig, LossWeights
from .errors import AugmentationError, ContractError
from .geometry import boxes_to_array, cxcywh_to_xyxy, paired_giou, pairwise_giou
from .models import Assignment, AugmentedLabelSet, LabelEntry, LabelSet
from .tensor import Tensor

logger = logging.getLogger(__name__)

Labels = Union[LabelSet, AugmentedLabelSet]


@dataclass
class LayerLoss:
    """Weighted loss terms of one decoder layer."""
    cls: float
    l1: float
    giou: float
    num_matched: int

    @property
    def total(self) -> float:
        return self.cls + self.l1 + self.giou


def label_arrays(labels: Labels) -> tuple:
    """(class ids [M'], cxcywh boxes [M', 4]) of the foreground entries."""
    if isinstance(labels, AugmentedLabelSet):
        classes = [e.class_id for e in labels.entries]
        boxes = [e.box for e in labels.entries]
    else:
        classes = [c for c, _ in labels.foreground]
        boxes = [b for _, b in labels.foreground]
    return np.asarray(classes, dtype=np.int64), boxes_to_array(boxes)


def match_cost_matrix(labels: Labels, preds, weights: LossWeights) -> np.ndarray:
    """
    Pairwise matching cost between label entries and predictions.

    cost[i, j] = -w_cls * p_j(class_i) + w_l1 * |b_i - b_j|_1 + w_giou * (1 - giou(b_i, b_j))

    Args:
        labels: Foreground entries (M' of them)
        preds: LayerOutput with N predictions
        weights: Cost weights

    Returns:
        [M', N] array
    """
    classes, target = label_arrays(labels)
    probs = preds.class_probs.data
    boxes = preds.boxes.data
    if classes.size == 0:
        return np.zeros((0, boxes.shape[0]))
    if classes.size > boxes.shape[0]:
        raise ContractError(f"{classes.size} label entries exceed {boxes.shape[0]} predictions")
    cost_cls = -probs[:, classes].T
    cost_l1 = np.abs(target[:, None, :] - boxes[None, :, :]).sum(axis=-1)
    cost_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(target), cxcywh_to_xyxy(boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian(cost: np.ndarray) -> Assignment:
    """
    Minimum-cost injective assignment of every row to a distinct column.

    Shortest augmenting path with potentials, rows inserted in index order.
    Columns are scanned in increasing index and only a strictly smaller
    reduced cost replaces the current best, so ties go to the lowest column.

    Args:
        cost: [M', N] finite matrix with M' <= N

    Returns:
        Assignment of all M' rows; total_cost summed in row order
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {a.shape}")
    n_rows, n_cols = a.shape
    if n_rows > n_cols:
        raise ContractError(f"cannot assign {n_rows} rows to {n_cols} columns")
    if not np.all(np.isfinite(a)):
        raise ContractError("cost matrix has non-finite entries")
    if n_rows == 0:
        return Assignment({}, 0.0)

    u = np.zeros(n_rows + 1)
    v = np.zeros(n_cols + 1)
    owner = np.zeros(n_cols + 1, dtype=np.int64)     # owner[j] = 1-based row, 0 = free
    way = np.zeros(n_cols + 1, dtype=np.int64)
    for row in range(1, n_rows + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(n_cols + 1, np.inf)
        used = np.zeros(n_cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            j1 = int(np.argmin(np.where(free, minv[1:], np.inf))) + 1
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = {int(owner[j]) - 1: j - 1 for j in range(1, n_cols + 1) if owner[j]}
    total = 0.0
    for r in range(n_rows):
        total += a[r, pairs[r]]
    return Assignment(pairs, float(total))


def augment_none(labels: LabelSet) -> AugmentedLabelSet:
    entries = [LabelEntry(i, c, b) for i, (c, b) in enumerate(labels.foreground)]
    return AugmentedLabelSet(entries, labels.pad_to, "none", 1.0, labels.num_objects)


def _expand(labels: LabelSet, counts: Sequence[int], strategy: str,
            parameter: float) -> AugmentedLabelSet:
    entries = []
    for i, ((class_id, box), count) in enumerate(zip(labels.foreground, counts)):
        entries.extend(LabelEntry(i, class_id, box) for _ in range(count))
    return AugmentedLabelSet(entries, labels.pad_to, strategy, parameter, labels.num_objects)


def augment_fixed_repeat(labels: LabelSet, repeat: int) -> AugmentedLabelSet:
    """Repeat every positive label exactly `repeat` times, keeping the padded length N."""
    if repeat < 1:
        raise AugmentationError(f"repeat must be >= 1, got {repeat}")
    needed = repeat * labels.num_objects
    if needed > labels.pad_to:
        raise AugmentationError(
            f"repeat {repeat} x {labels.num_objects} labels = {needed} exceeds "
            f"{labels.pad_to} queries; lower repeat or raise num_queries"
        )
    return _expand(labels, [repeat] * labels.num_objects, "repeat", float(repeat))


def augment_fixed_ratio(labels: LabelSet, ratio: float, seed: int) -> AugmentedLabelSet:
    """
    Fill floor(N * ratio) slots with positive labels.

    Every label gets floor(F / M) copies and F mod M distinct labels, drawn
    without replacement under `seed`, get one more. F is raised to M when
    smaller so no label loses its only entry.
    """
    if not 0.0 < ratio <= 1.0:
        raise AugmentationError(f"ratio must be in (0, 1], got {ratio}")
    m = labels.num_objects
    if m == 0:
        return _expand(labels, [], "ratio", ratio)
    slots = max(math.floor(labels.pad_to * ratio + 1e-9), m)
    counts = np.full(m, slots // m, dtype=np.int64)
    extra = slots % m
    if extra:
        chosen = np.random.default_rng(seed).choice(m, size=extra, replace=False)
        counts[chosen] += 1
    logger.debug("fixed ratio %.2f: %d slots over %d labels", ratio, slots, m)
    return _expand(labels, counts.tolist(), "ratio", ratio)


def augment_labels(labels: LabelSet, config: AugmentConfig, enabled: bool,
                   seed: int = 0) -> AugmentedLabelSet:
    """Apply the configured augmentation, or the identity when disabled."""
    if not enabled:
        return augment_none(labels)
    if config.mode == "repeat":
        return augment_fixed_repeat(labels, config.repeat)
    return augment_fixed_ratio(labels, config.ratio, seed)


def assign_labels(labels: Labels, preds, weights: LossWeights) -> Assignment:
    """Hungarian assignment of label entries to predictions under the matching cost."""
    assignment = hungarian(match_cost_matrix(labels, preds, weights))
    logger.debug("matched %d entries, cost %.4f", len(assignment.pairs), assignment.total_cost)
    return assignment


def layer_loss(preds, labels: Labels, weights: LossWeights,
               assignment: Optional[Assignment] = None) -> tuple:
    """
    Set loss of one decoder layer.

    Cross-entropy over all N predictions (matched ones toward their class,
    the rest toward no-object with weight eos_coef) plus L1 and 1 - GIoU over
    matched pairs, box terms normalised by the number of foreground entries.

    Returns:
        (scalar Tensor, LayerLoss)
    """
    classes, target = label_arrays(labels)
    if assignment is None:
        assignment = assign_labels(labels, preds, weights)
    n, width = preds.class_logits.dims
    no_object = width - 1

    target_cls = np.full(n, no_object, dtype=np.int64)
    class_weight = np.full(n, weights.eos_coef)
    rows = np.asarray(assignment.rows(), dtype=np.int64)
    cols = np.asarray(assignment.cols(), dtype=np.int64)
    if rows.size:
        target_cls[cols] = classes[rows]
        class_weight[cols] = 1.0

    logp = T.log_softmax(preds.class_logits, axis=-1)
    picked = T.index(logp, (np.arange(n), target_cls))
    ce = T.scale(T.sum(picked * Tensor(class_weight)), -1.0 / class_weight.sum())
    loss_cls = T.scale(ce, weights.cls)

    if rows.size:
        matched = T.index(preds.boxes, cols)
        wanted = target[rows]
        norm = 1.0 / len(classes)
        loss_l1 = T.scale(T.sum(T.abs(matched - Tensor(wanted))), weights.l1 * norm)
        giou = paired_giou(matched, wanted)
        loss_giou = T.scale(T.sum(Tensor(np.ones(rows.size)) - giou), weights.giou * norm)
        total = loss_cls + loss_l1 + loss_giou
        terms = LayerLoss(loss_cls.item(), loss_l1.item(), loss_giou.item(), int(rows.size))
    else:
        total = loss_cls
        terms = LayerLoss(loss_cls.item(), 0.0, 0.0, 0)
    return total, terms


def set_loss(outputs: Sequence, labels: Labels, weights: LossWeights,
             assignments: Optional[Sequence[Assignment]] = None) -> tuple:
    """
    Deep-supervision loss: independent matching and loss per decoder layer, summed.

    Args:
        outputs: One LayerOutput per decoder layer
        labels: Label set (augmented or plain) shared by every layer
        weights: Loss weights (also used for matching)
        assignments: Optional fixed per-layer assignments

    Returns:
        (scalar Tensor total, list of LayerLoss per layer)
    """
    if not outputs:
        raise ContractError("set_loss needs at least one layer output")
    if assignments is not None and len(assignments) != len(outputs):
        raise ContractError(
            f"{len(assignments)} assignments given for {len(outputs)} layer outputs"
        )
    total = None
    breakdown = []
    for i, preds in enumerate(outputs):
        fixed = assignments[i] if assignments is not None else None
        loss, terms = layer_loss(preds, labels, weights, fixed)
        total = loss if total is None else total + loss
        breakdown.append(terms)
    return total, breakdown


def summarize_losses(breakdown: Sequence[LayerLoss]) -> dict:
    """Layer-summed loss terms keyed like the metrics columns."""
    cls = sum(t.cls for t in breakdown)
    l1 = sum(t.l1 for t in breakdown)
    giou = sum(t.giou for t in breakdown)
    return {"loss_total": cls + l1 + giou, "loss_cls": cls, "loss_l1": l1, "loss_giou": giou}
