import json

import pytest

from dedetr.formatter import (
    ABLATION_COLUMNS,
    EVAL_COLUMNS,
    SWEEP_COLUMNS,
    ablation_rows,
    eval_rows,
    format_csv,
    format_epoch,
    format_json,
    format_summary,
    format_terminal,
    sweep_rows,
    write_csv,
)
from dedetr.models import EvalResult
from dedetr.report import AblationAggregator, CellResult


@pytest.fixture
def result():
    return EvalResult(0.25, 0.5, 0.125, {0: 0.3, 2: 0.2}, num_scenes=4,
                      num_ground_truth=9, num_detections=20)


def test_format_csv_fixed_columns_and_precision():
    text = format_csv([{"a": 1, "b": 0.5, "c": True}], ("c", "a", "b"))
    assert text == "c,a,b\n1,1,0.500000\n"


def test_write_csv_creates_parents(tmp_path):
    path = write_csv(tmp_path / "nested" / "out.csv", [], ("x",))
    assert path.read_text() == "x\n"


def test_format_json(result):
    data = json.loads(format_json(result))
    assert data["ap50"] == 0.5
    assert data["per_class_ap"] == {"0": 0.3, "2": 0.2}
    assert data["num_detections"] == 20


def test_eval_rows(result):
    rows = eval_rows([("final", result)])
    assert set(rows[0]) == set(EVAL_COLUMNS)
    assert rows[0]["label"] == "final"


def test_sweep_rows_render_none(result):
    rows = sweep_rows([(0.3, result), (None, result)])
    assert [r["nms_threshold"] for r in rows] == ["0.30", "none"]
    assert set(rows[0]) == set(SWEEP_COLUMNS)


def test_ablation_rows_columns(result):
    report = AblationAggregator().aggregate(
        [CellResult("00-baseline", 1, False, False, False, result)])
    rows = ablation_rows(report)
    assert format_csv(rows, ABLATION_COLUMNS).splitlines() == [
        "config_id,sf,ms,la,seed,ap,ap50,ap75",
        "00-baseline,0,0,0,1,0.250000,0.500000,0.125000",
    ]


def test_format_terminal_mentions_metrics(result):
    text = format_terminal(result, title="Eval")
    assert "Eval" in text
    assert "0.5000" in text
    assert "class 2" in text
    assert "detections 20" in text


def test_format_epoch_and_summary(result):
    line = format_epoch({"epoch": 3, "loss_total": 1.5, "ap50": 0.5})
    assert "epoch   3" in line and "1.5000" in line
    report = AblationAggregator().aggregate(
        [CellResult("00-baseline", 1, False, False, False, result)])
    table = format_summary(report.summary)
    assert "00-baseline" in table and "0.5000" in table
