import pytest

from dedetr.errors import ConfigError, ContractError, GeometryError
from dedetr.models import (
    Assignment,
    AugmentedLabelSet,
    Box,
    BoxFormat,
    Detection,
    EvalResult,
    LabelEntry,
    LabelSet,
    SceneSpec,
)


def test_box_defaults_to_cxcywh():
    box = Box((0.5, 0.5, 0.2, 0.3))
    assert box.fmt == BoxFormat.CXCYWH
    assert box.values == (0.5, 0.5, 0.2, 0.3)


def test_box_rejects_wrong_arity_and_nan():
    with pytest.raises(GeometryError):
        Box((0.5, 0.5, 0.2))
    with pytest.raises(GeometryError):
        Box((0.5, float("nan"), 0.2, 0.2))


def test_xyxy_box_allows_pixels():
    assert Box((10, 20, 30, 40), BoxFormat.XYXY).values == (10.0, 20.0, 30.0, 40.0)


def test_detection_validation():
    box = Box((0.5, 0.5, 0.2, 0.2))
    assert Detection(box, 2, 0.4).class_id == 2
    with pytest.raises(ContractError):
        Detection(box, 0, 1.5)
    with pytest.raises(ContractError):
        Detection(box, -1, 0.5)


def test_label_set_capacity_and_classes():
    box = Box((0.5, 0.5, 0.2, 0.2))
    labels = LabelSet([(0, box), (1, box)], 4, num_classes=2)
    assert labels.num_objects == 2
    with pytest.raises(ContractError):
        LabelSet([(0, box)] * 3, 2)
    with pytest.raises(ContractError):
        LabelSet([(5, box)], 4, num_classes=2)
    with pytest.raises(GeometryError):
        LabelSet([(0, Box((0, 0, 1, 1), BoxFormat.XYXY))], 4)


def test_augmented_label_set_contiguity():
    box = Box((0.5, 0.5, 0.2, 0.2))
    entries = [LabelEntry(0, 0, box), LabelEntry(0, 0, box), LabelEntry(1, 1, box)]
    assert AugmentedLabelSet(entries, 4, "repeat", 2, num_sources=2).counts() == [2, 1]
    with pytest.raises(ContractError):
        AugmentedLabelSet([entries[0], entries[2], entries[1]], 4, num_sources=2)
    with pytest.raises(ContractError):
        AugmentedLabelSet(entries, 2, num_sources=2)
    with pytest.raises(ContractError):
        AugmentedLabelSet(entries, 4, num_sources=1)


def test_assignment_rows_and_cols():
    assignment = Assignment({2: 0, 0: 3}, 1.5)
    assert assignment.rows() == [0, 2]
    assert assignment.cols() == [3, 0]
    with pytest.raises(ContractError):
        Assignment({0: 1, 1: 1}, 0.0)


def test_scene_spec_validation():
    assert SceneSpec().strides == (8, 16, 32)
    with pytest.raises(ConfigError):
        SceneSpec(image_size=100)
    with pytest.raises(ConfigError):
        SceneSpec(scale_range=(0.5, 0.2))
    with pytest.raises(ConfigError):
        SceneSpec(max_objects=0)


def test_eval_result_range():
    assert EvalResult(0.1, 0.2, 0.05).per_class_ap == {}
    with pytest.raises(ContractError):
        EvalResult(1.2, 0.0, 0.0)
