import numpy as np
import pytest

from dedetr import tensor as T
from dedetr.errors import ContractError, GeometryError
from dedetr.geometry import (
    convert,
    cxcywh_to_xyxy,
    giou,
    iou,
    nms,
    paired_giou,
    pairwise_giou,
    refine_box,
)
from dedetr.models import Box, BoxFormat, Detection
from dedetr.selftest import greedy_nms_reference, naive_nms_violations, random_detections
from dedetr.tensor import Tensor


def xyxy(*values):
    return Box(values, BoxFormat.XYXY)


def test_convert_cxcywh_to_xyxy_pixels():
    box = Box((0.5, 0.5, 0.2, 0.4))
    out = convert(box, BoxFormat.XYXY, 100, 50)
    assert out.values == pytest.approx((40.0, 15.0, 60.0, 35.0))
    back = convert(out, BoxFormat.CXCYWH, 100, 50)
    assert back.values == pytest.approx(box.values)


def test_convert_rejects_degenerate_xyxy():
    with pytest.raises(GeometryError):
        convert(xyxy(1, 1, 1, 3), BoxFormat.CXCYWH)


def test_iou_examples():
    a = xyxy(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, xyxy(1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou(a, xyxy(5, 5, 6, 6)) == 0.0


def test_giou_examples():
    a = xyxy(0, 0, 2, 2)
    assert giou(a, a) == pytest.approx(1.0)
    assert giou(a, xyxy(3, 0, 5, 2)) == pytest.approx(-0.2)
    assert -1.0 <= giou(a, xyxy(100, 100, 101, 101)) < 0.0


def test_mixed_formats_rejected():
    with pytest.raises(GeometryError):
        iou(Box((0.5, 0.5, 0.1, 0.1)), xyxy(0, 0, 1, 1))


def test_box_validation():
    with pytest.raises(GeometryError):
        Box((0.5, 0.5, 0.0, 0.1))
    with pytest.raises(GeometryError):
        Box((0.5, 1.2, 0.1, 0.1))
    with pytest.raises(GeometryError):
        xyxy(2, 0, 1, 1)


def test_refine_box_zero_delta_is_identity():
    ref = Box((0.3, 0.6, 0.2, 0.1))
    assert refine_box(ref, [0, 0, 0, 0]).values == pytest.approx(ref.values)
    moved = refine_box(ref, [1.0, 0, 0, 0])
    assert moved.values[0] > ref.values[0]


def test_pairwise_giou_matches_scalar():
    a = np.array([[0.3, 0.3, 0.2, 0.2], [0.6, 0.5, 0.3, 0.4]])
    b = np.array([[0.35, 0.3, 0.2, 0.3], [0.9, 0.9, 0.1, 0.1], [0.6, 0.5, 0.3, 0.4]])
    got = pairwise_giou(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
    for i in range(2):
        for j in range(3):
            assert got[i, j] == pytest.approx(giou(Box(tuple(a[i])), Box(tuple(b[j]))))


def test_paired_giou_gradient():
    target = np.array([[0.4, 0.4, 0.3, 0.2], [0.7, 0.6, 0.2, 0.2]])
    pred = Tensor([[0.45, 0.38, 0.25, 0.22], [0.55, 0.5, 0.2, 0.3]])
    value = paired_giou(pred, target)
    assert value.data[0] == pytest.approx(giou(Box(tuple(pred.data[0])), Box(tuple(target[0]))))
    assert T.finite_diff_check(lambda p: T.sum(paired_giou(p, target)), pred) < 1e-5


def det(cx, cy, w, h, class_id, score):
    return Detection(Box((cx, cy, w, h)), class_id, score)


def test_nms_suppresses_overlaps_of_same_class():
    a = det(0.5, 0.5, 0.2, 0.2, 0, 0.9)
    b = det(0.51, 0.5, 0.2, 0.2, 0, 0.8)
    c = det(0.51, 0.5, 0.2, 0.2, 1, 0.7)
    assert nms([b, a, c], 0.5) == [a, c]


def test_nms_keeps_disjoint_and_orders_by_score():
    a = det(0.2, 0.2, 0.1, 0.1, 0, 0.3)
    b = det(0.8, 0.8, 0.1, 0.1, 0, 0.6)
    assert nms([a, b], 0.5) == [b, a]
    assert nms([], 0.5) == []


def test_nms_ties_prefer_lower_index():
    a = det(0.5, 0.5, 0.2, 0.2, 0, 0.5)
    b = det(0.5, 0.5, 0.2, 0.2, 0, 0.5)
    kept = nms([a, b], 0.5)
    assert len(kept) == 1 and kept[0] is a


def test_nms_threshold_range():
    with pytest.raises(ContractError):
        nms([], 0.0)


@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.7, 0.9])
def test_nms_is_idempotent(threshold):
    rng = np.random.default_rng(int(threshold * 10))
    for _ in range(100):
        kept = nms(random_detections(rng), threshold)
        again = nms(kept, threshold)
        assert [id(d) for d in again] == [id(d) for d in kept]


@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.7, 0.9])
def test_nms_matches_greedy_reference(threshold):
    rng = np.random.default_rng(100 + int(threshold * 10))
    for _ in range(100):
        dets = random_detections(rng)
        want = [dets[i] for i in greedy_nms_reference(dets, threshold)]
        assert [id(d) for d in nms(dets, threshold)] == [id(d) for d in want]


def test_nms_equal_duplicates_keep_first():
    a = det(0.5, 0.5, 0.2, 0.2, 0, 0.5)
    twin = det(0.5, 0.5, 0.2, 0.2, 0, 0.5)
    other = det(0.2, 0.2, 0.1, 0.1, 0, 0.9)
    dets = [other, a, twin]
    kept = nms(dets, 0.5)
    assert [id(d) for d in kept] == [id(other), id(a)]
    assert naive_nms_violations(dets, kept, 0.5) is None
    # keeping the later twin instead breaks the lower-index tie rule
    assert naive_nms_violations(dets, [other, twin], 0.5) is not None
