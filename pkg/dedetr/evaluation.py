"""
dedetr - Detection evaluation.

Class-wise greedy matching of scored detections to ground truth, 101-point
interpolated average precision, and AP / AP50 / AP75 over a scene set.
"""

import logging
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .geometry import iou, nms
from .models import Box, BoxFormat, Detection, EvalResult, LabelSet

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.arange(101) / 100.0


def compute_pr(dets_per_scene: Sequence[Sequence[Detection]],
               labels_per_scene: Sequence[LabelSet], iou_thr: float,
               class_id: int) -> list:
    """
    Precision / recall after each detection of one class, by descending score.

    Each detection takes the unmatched ground truth of its scene with the
    highest IoU, provided that IoU is at least iou_thr; otherwise it is a
    false positive. Score ties keep scene order, then detection order.

    Args:
        dets_per_scene: Detections per scene
        labels_per_scene: Ground truth per scene (same order)
        iou_thr: Minimum IoU for a true positive
        class_id: Class to evaluate

    Returns:
        List of (precision, recall) points; empty when the class has no
        ground truth or no detections
    """
    gts = [[box for c, box in labels.foreground if c == class_id] for labels in labels_per_scene]
    num_gt = sum(len(g) for g in gts)
    candidates = [(det.score, s, k, det)
                  for s, dets in enumerate(dets_per_scene)
                  for k, det in enumerate(dets) if det.class_id == class_id]
    if num_gt == 0 or not candidates:
        return []
    candidates.sort(key=lambda item: (-item[0], item[1], item[2]))

    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = fp = 0
    points = []
    for _, scene, _, det in candidates:
        best, best_iou = -1, iou_thr
        for g, gt_box in enumerate(gts[scene]):
            if matched[scene][g]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap >= best_iou:
                best, best_iou = g, overlap
        if best >= 0:
            matched[scene][best] = True
            tp += 1
        else:
            fp += 1
        points.append((tp / (tp + fp), tp / num_gt))
    return points


def compute_ap(points: Sequence[tuple]) -> float:
    """Mean over recall thresholds 0, 0.01 .. 1 of the best precision at recall >= t."""
    if not points:
        return 0.0
    precision = np.array([p for p, _ in points], dtype=np.float64)
    recall = np.array([r for _, r in points], dtype=np.float64)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS - 1e-12, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_detections(dets_per_scene: Sequence[Sequence[Detection]],
                        labels_per_scene: Sequence[LabelSet],
                        num_classes: int) -> EvalResult:
    """
    AP averaged over classes that have ground truth.

    Returns:
        EvalResult with ap over IoU 0.50:0.05:0.95, ap50, ap75 and per-class AP
    """
    per_class, per_class50, per_class75 = {}, [], []
    for c in range(num_classes):
        if not any(cls == c for labels in labels_per_scene for cls, _ in labels.foreground):
            logger.debug("class %d has no ground truth, skipped", c)
            continue
        aps = [compute_ap(compute_pr(dets_per_scene, labels_per_scene, float(t), c))
               for t in IOU_THRESHOLDS]
        per_class[c] = float(np.mean(aps))
        per_class50.append(aps[0])
        per_class75.append(aps[5])
    num_gt = sum(labels.num_objects for labels in labels_per_scene)
    num_det = sum(len(d) for d in dets_per_scene)
    if not per_class:
        logger.warning("no ground truth in %d scenes; AP reported as 0", len(labels_per_scene))
        return EvalResult(0.0, 0.0, 0.0, {}, len(labels_per_scene), num_gt, num_det)
    return EvalResult(
        ap=float(np.mean(list(per_class.values()))),
        ap50=float(np.mean(per_class50)),
        ap75=float(np.mean(per_class75)),
        per_class_ap=per_class,
        num_scenes=len(labels_per_scene),
        num_ground_truth=num_gt,
        num_detections=num_det,
    )


def predict(model, scene, nms_threshold: Optional[float] = None) -> list:
    """
    Detections from the last decoder layer.

    Each query reports its most likely foreground class with that
    probability as score. NMS runs only when nms_threshold is given.
    """
    with T.no_grad():
        final = model(scene.pyramid)[-1]
    probs = final.class_probs.data[:, :-1]
    classes = probs.argmax(axis=1)
    scores = probs[np.arange(len(classes)), classes]
    boxes = np.clip(final.boxes.data, 1e-9, 1.0)
    dets = [Detection(Box(tuple(b), BoxFormat.CXCYWH), int(c), float(np.clip(s, 0.0, 1.0)))
            for b, c, s in zip(boxes, classes, scores)]
    if nms_threshold is not None:
        dets = nms(dets, nms_threshold)
    return dets


def evaluate(model, scenes: Sequence, num_classes: int, label_aug: bool,
             nms_threshold: Optional[float] = 0.7) -> EvalResult:
    """
    Evaluate a model on scenes.

    NMS removes duplicates only for models trained with label augmentation,
    whose one-to-many supervision produces them.
    """
    threshold = nms_threshold if label_aug else None
    dets = [predict(model, scene, threshold) for scene in scenes]
    result = evaluate_detections(dets, [s.labels for s in scenes], num_classes)
    logger.debug("evaluated %d scenes: AP %.4f AP50 %.4f", len(scenes), result.ap, result.ap50)
    return result
