from unittest.mock import patch

import pytest

from dedetr.evaluation import (
    compute_ap,
    compute_pr,
    evaluate,
    evaluate_detections,
    predict,
)
from dedetr.models import Box, Detection, LabelSet, SceneSpec
from dedetr.scenes import gen_dataset
from dedetr.transformer import DetectionTransformer

GT_A = Box((0.3, 0.3, 0.2, 0.2))
GT_B = Box((0.7, 0.7, 0.2, 0.2))


@pytest.fixture
def two_objects():
    return [LabelSet([(0, GT_A), (0, GT_B)], 4)]


def test_pr_points_greedy(two_objects):
    dets = [[Detection(GT_A, 0, 0.9), Detection(Box((0.5, 0.1, 0.1, 0.1)), 0, 0.8)]]
    assert compute_pr(dets, two_objects, 0.5, 0) == [(1.0, 0.5), (0.5, 0.5)]


def test_pr_duplicate_is_false_positive(two_objects):
    dets = [[Detection(GT_A, 0, 0.9), Detection(GT_A, 0, 0.8), Detection(GT_B, 0, 0.7)]]
    assert compute_pr(dets, two_objects, 0.5, 0) == [
        (1.0, 0.5), (0.5, 0.5), (pytest.approx(2 / 3), 1.0)]


def test_pr_empty_cases(two_objects):
    assert compute_pr([[]], two_objects, 0.5, 0) == []
    assert compute_pr([[Detection(GT_A, 1, 0.9)]], two_objects, 0.5, 1) == []


def test_ap_single_point():
    assert compute_ap([(1.0, 0.5)]) == pytest.approx(51 / 101)


def test_ap_perfect_and_empty():
    assert compute_ap([(1.0, 0.5), (1.0, 1.0)]) == pytest.approx(1.0)
    assert compute_ap([]) == 0.0


def test_ap_uses_precision_envelope():
    # precision 0.5 at recall 0.5 lifts to 2/3 from the later point
    points = [(1.0, 0.25), (0.5, 0.5), (2 / 3, 1.0)]
    expected = (26 * 1.0 + 75 * (2 / 3)) / 101
    assert compute_ap(points) == pytest.approx(expected)


def test_evaluate_detections_perfect(two_objects):
    dets = [[Detection(GT_A, 0, 0.9), Detection(GT_B, 0, 0.8)]]
    result = evaluate_detections(dets, two_objects, num_classes=3)
    assert result.ap == pytest.approx(1.0)
    assert result.ap50 == pytest.approx(1.0)
    assert result.ap75 == pytest.approx(1.0)
    assert list(result.per_class_ap) == [0]
    assert result.num_ground_truth == 2 and result.num_detections == 2


def test_evaluate_detections_loose_box_fails_at_high_iou(two_objects):
    loose = Box((0.31, 0.3, 0.24, 0.2))
    dets = [[Detection(loose, 0, 0.9), Detection(GT_B, 0, 0.8)]]
    result = evaluate_detections(dets, two_objects, num_classes=1)
    assert result.ap50 == pytest.approx(1.0)
    assert result.ap75 == pytest.approx(1.0)
    assert result.ap < 1.0


def test_evaluate_detections_no_ground_truth():
    result = evaluate_detections([[]], [LabelSet([], 4)], num_classes=2)
    assert (result.ap, result.ap50, result.ap75) == (0.0, 0.0, 0.0)


def test_predict_one_detection_per_query(tiny_config, tiny_spec):
    model = DetectionTransformer(tiny_config.model, seed=0)
    scene = gen_dataset(tiny_spec, 1)[0]
    dets = predict(model, scene)
    assert len(dets) == tiny_config.model.num_queries
    assert all(0 <= d.class_id < tiny_config.model.num_classes for d in dets)
    assert len(predict(model, scene, nms_threshold=0.5)) <= len(dets)


def test_evaluate_applies_nms_only_with_label_aug(tiny_config, tiny_spec):
    model = DetectionTransformer(tiny_config.model, seed=0)
    scenes = gen_dataset(tiny_spec, 2)
    with patch("dedetr.evaluation.nms", side_effect=lambda dets, thr: dets) as fake:
        evaluate(model, scenes, 3, label_aug=False, nms_threshold=0.7)
        fake.assert_not_called()
        evaluate(model, scenes, 3, label_aug=True, nms_threshold=0.7)
        assert fake.call_count == 2


def test_untrained_model_scores_near_zero(tiny_config):
    small = SceneSpec(image_size=64, num_classes=3, max_objects=2, channels=8,
                      scale_range=(0.05, 0.15))
    model = DetectionTransformer(tiny_config.model, seed=0)
    result = evaluate(model, gen_dataset(small, 6), 3, label_aug=False)
    assert result.ap < 0.05
    again = evaluate(model, gen_dataset(small, 6), 3, label_aug=False)
    assert again == result
