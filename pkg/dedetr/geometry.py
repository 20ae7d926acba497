"""
dedetr - Box geometry.

Conversions between normalised cxcywh and absolute xyxy boxes, IoU / GIoU
(scalar, pairwise and differentiable paired forms), the sigmoid-space box
refinement transform and class-wise greedy NMS.
"""

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, GeometryError
from .models import Box, BoxFormat, Detection
from .tensor import Tensor


def convert(box: Box, target: BoxFormat, image_w: float = 1.0, image_h: float = 1.0) -> Box:
    """
    Re-express a box in another parameterisation.

    Args:
        box: Source box
        target: Format to convert to
        image_w: Image width used to (de)normalise
        image_h: Image height used to (de)normalise

    Returns:
        Equivalent box in the target format
    """
    target = BoxFormat(target)
    if box.fmt == target:
        return box
    if box.fmt == BoxFormat.CXCYWH:
        cx, cy, w, h = box.values
        return Box(((cx - 0.5 * w) * image_w, (cy - 0.5 * h) * image_h,
                    (cx + 0.5 * w) * image_w, (cy + 0.5 * h) * image_h), BoxFormat.XYXY)
    x1, y1, x2, y2 = box.values
    if x2 <= x1 or y2 <= y1:
        raise GeometryError(f"degenerate xyxy box {box.values}")
    return Box(((x1 + x2) / (2.0 * image_w), (y1 + y2) / (2.0 * image_h),
                (x2 - x1) / image_w, (y2 - y1) / image_h), BoxFormat.CXCYWH)


def _as_xyxy(box: Box) -> tuple:
    return convert(box, BoxFormat.XYXY).values if box.fmt == BoxFormat.CXCYWH else box.values


def _check_same_format(a: Box, b: Box) -> None:
    if a.fmt != b.fmt:
        raise GeometryError(f"boxes use different formats: {a.fmt.value} vs {b.fmt.value}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    _check_same_format(a, b)
    ax1, ay1, ax2, ay2 = _as_xyxy(a)
    bx1, by1, bx2, by2 = _as_xyxy(b)
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    """Generalised IoU: IoU minus the share of the enclosing hull not covered by the union."""
    _check_same_format(a, b)
    ax1, ay1, ax2, ay2 = _as_xyxy(a)
    bx1, by1, bx2, by2 = _as_xyxy(b)
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if union <= 0 or hull <= 0:
        return 0.0
    return inter / union - (hull - union) / hull


def refine_box(reference: Box, delta: Sequence[float]) -> Box:
    """sigmoid(inverse_sigmoid(reference) + delta), componentwise."""
    if reference.fmt != BoxFormat.CXCYWH:
        raise GeometryError("refine_box needs a cxcywh-normalised reference")
    with T.no_grad():
        logits = T.inverse_sigmoid(Tensor(reference.values))
        refined = T.sigmoid(T.add(logits, Tensor(np.asarray(delta, dtype=np.float64))))
    return Box(tuple(refined.data), BoxFormat.CXCYWH)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list:
    """
    Class-wise greedy non-maximum suppression.

    Detections are visited by descending score, ties broken by lower input index.
    A detection survives iff its IoU with every already-kept detection of the
    same class is <= iou_threshold. Output is in keep order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ContractError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list = []
    kept_by_class: dict = {}
    for i in order:
        det = dets[i]
        same_class = kept_by_class.setdefault(det.class_id, [])
        if all(iou(det.box, other.box) <= iou_threshold for other in same_class):
            same_class.append(det)
            kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# array forms used by matching and loss
# ---------------------------------------------------------------------------

def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack box values into an [n, 4] array."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.values for b in boxes], dtype=np.float64)


def cxcywh_to_xyxy(arr: np.ndarray) -> np.ndarray:
    cx, cy, w, h = (arr[..., i] for i in range(4))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def pairwise_giou(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """GIoU between every row of a [n, 4] and every row of b [m, 4] -> [n, m]."""
    a = a_xyxy[:, None, :]
    b = b_xyxy[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = ((np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
            * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])))
    return inter / union - (hull - union) / hull


def paired_giou(pred_cxcywh: Tensor, target_cxcywh: np.ndarray) -> Tensor:
    """Differentiable GIoU between row i of pred [m, 4] and row i of target [m, 4] -> [m]."""
    px1 = pred_cxcywh[:, 0] - pred_cxcywh[:, 2] * 0.5
    py1 = pred_cxcywh[:, 1] - pred_cxcywh[:, 3] * 0.5
    px2 = pred_cxcywh[:, 0] + pred_cxcywh[:, 2] * 0.5
    py2 = pred_cxcywh[:, 1] + pred_cxcywh[:, 3] * 0.5
    t = cxcywh_to_xyxy(np.asarray(target_cxcywh, dtype=np.float64))
    tx1, ty1, tx2, ty2 = (Tensor(t[:, i]) for i in range(4))

    inter = (T.relu(T.minimum(px2, tx2) - T.maximum(px1, tx1))
             * T.relu(T.minimum(py2, ty2) - T.maximum(py1, ty1)))
    area_p = pred_cxcywh[:, 2] * pred_cxcywh[:, 3]
    area_t = Tensor((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1]))
    union = area_p + area_t - inter
    hull = ((T.maximum(px2, tx2) - T.minimum(px1, tx1))
            * (T.maximum(py2, ty2) - T.minimum(py1, ty1)))
    return inter / union - (hull - union) / hull
