import json
from unittest.mock import patch

import pytest
from click.testing import CliRunner

from dedetr.cli import main, parse_seeds, parse_sweep
from dedetr.config import config_to_dict, with_overrides
from dedetr.errors import ConfigError, NumericError
from dedetr.models import EvalResult
from dedetr.orchestrator import ExperimentOrchestrator
from dedetr.report import CellResult
from dedetr.selftest import CheckResult


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(config_to_dict(tiny_config)))
    return path


def test_parse_sweep():
    assert parse_sweep("0.3:0.9:0.1") == [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert parse_sweep("0.5:0.5:0.1") == [0.5]
    for bad in ("0.3:0.9", "a:b:c", "0.9:0.3:0.1", "0.3:0.9:0"):
        with pytest.raises(ConfigError):
            parse_sweep(bad)


def test_parse_seeds():
    assert parse_seeds("1,2,3") == [1, 2, 3]
    with pytest.raises(ConfigError):
        parse_seeds("1,x")
    with pytest.raises(ConfigError):
        parse_seeds(",")


def test_train_then_eval(runner, config_file, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(main, ["train", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "epoch   1" in result.output
    assert (out / "metrics.csv").exists() and (out / "final.dedt").exists()

    result = runner.invoke(main, ["eval", "--checkpoint", str(out / "final.dedt"),
                                  "--out", str(tmp_path / "eval"), "--output", "json"])
    assert result.exit_code == 0, result.output
    assert "ap50" in json.loads(result.output[result.output.index("{"):])
    assert (tmp_path / "eval" / "eval.csv").exists()

    result = runner.invoke(main, ["eval", "--checkpoint", str(out / "final.dedt"),
                                  "--config", str(config_file), "--nms-sweep", "0.3:0.9:0.1",
                                  "--out", str(tmp_path / "sweep")])
    assert result.exit_code == 0, result.output
    rows = (tmp_path / "sweep" / "nms_sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 7 + 1


def test_invalid_config_exits_2(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"epochs": 0}}))
    result = runner.invoke(main, ["train", "--config", str(bad)])
    assert result.exit_code == 2
    assert "Error:" in result.output


def test_numeric_failure_exits_3(runner, config_file):
    with patch.object(ExperimentOrchestrator, "train", side_effect=NumericError("nan loss")):
        result = runner.invoke(main, ["train", "--config", str(config_file)])
    assert result.exit_code == 3
    assert "nan loss" in result.output


def test_shape_mismatch_exits_4(runner, config_file, tmp_path, tiny_config):
    out = tmp_path / "run"
    assert runner.invoke(main, ["train", "--config", str(config_file),
                                "--out", str(out)]).exit_code == 0
    wider = tmp_path / "wider.json"
    wider.write_text(json.dumps(config_to_dict(
        with_overrides(tiny_config, {"model": {"hidden_dim": 32, "ffn_dim": None}}))))
    result = runner.invoke(main, ["eval", "--checkpoint", str(out / "final.dedt"),
                                  "--config", str(wider)])
    assert result.exit_code == 4


def test_bad_checkpoint_exits_5(runner, config_file, tmp_path):
    junk = tmp_path / "junk.dedt"
    junk.write_bytes(b"JUNK" + b"\x00" * 16)
    result = runner.invoke(main, ["eval", "--checkpoint", str(junk),
                                  "--config", str(config_file)])
    assert result.exit_code == 5


def test_ablate_writes_grid(runner, config_file, tmp_path):
    def fake_cell(config_id, overrides, seed, out_dir=None):
        return CellResult(config_id, seed, False, False, False, EvalResult(0.1, 0.2, 0.05))

    with patch.object(ExperimentOrchestrator, "run_cell", side_effect=fake_cell):
        result = runner.invoke(main, ["ablate", "--config", str(config_file),
                                      "--seeds", "1,2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "03-sf-ms-la" in result.output
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 2


def test_selftest_reports_failures(runner):
    results = [CheckResult("hungarian_bruteforce", True, "ok", 0.1),
               CheckResult("nms_oracle", False, "detection 3 dropped", 0.1)]
    with patch("dedetr.cli.run_selftest", return_value=results):
        result = runner.invoke(main, ["selftest"])
    assert result.exit_code == 1
    assert "nms_oracle" in result.output


def test_selftest_single_check(runner):
    result = runner.invoke(main, ["selftest", "--check", "average_precision"])
    assert result.exit_code == 0, result.output
    assert "average_precision" in result.output


def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "0.1.0" in result.output
