"""
Experiment orchestrator - main pipeline for training, evaluation and ablations.

Builds the scene sets for a run configuration, trains and checkpoints models,
evaluates them (optionally across NMS thresholds), and runs ablation grids
with one model per worker thread, aggregating cells through the report engine.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, config_to_dict, with_overrides, worker_count
from .errors import ConfigError
from .evaluation import evaluate
from .formatter import (
    ABLATION_COLUMNS,
    EVAL_COLUMNS,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    ablation_rows,
    eval_rows,
    format_json,
    summary_rows,
    sweep_rows,
    write_csv,
)
from .models import EvalResult
from .report import AblationAggregator, AblationReport, CellResult
from .scenes import gen_dataset, subsample
from .training import METRIC_COLUMNS, Trainer
from .transformer import DetectionTransformer

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.dedt"
BEST_CHECKPOINT = "best.dedt"


@dataclass
class TrainOutcome:
    """Artifacts of one training run."""
    rows: List[dict]
    final: EvalResult
    metrics_path: Path
    final_checkpoint: Path
    best_checkpoint: Path


def _toggles(overrides: dict) -> dict:
    return {"model": overrides}


def ladder_components(config: RunConfig) -> list:
    """Sparse sampling, multi-scale and label augmentation switched on one at a time."""
    return [
        ("00-baseline", _toggles({"sparse_sampling": False, "multiscale": False,
                                  "label_aug": False})),
        ("01-sf", _toggles({"sparse_sampling": True, "multiscale": False, "label_aug": False})),
        ("02-sf-ms", _toggles({"sparse_sampling": True, "multiscale": True,
                               "label_aug": False})),
        ("03-sf-ms-la", _toggles({"sparse_sampling": True, "multiscale": True,
                                  "label_aug": True})),
    ]


def ladder_roi(config: RunConfig) -> list:
    """Number of sampled levels {1, 3} against RoI resolution {1, 4, 7}."""
    cells = []
    for levels, multiscale in ((1, False), (3, True)):
        for resolution in (1, 4, 7):
            cid = f"{len(cells):02d}-L{levels}-K{resolution}"
            cells.append((cid, _toggles({"multiscale": multiscale,
                                         "roi_resolution": resolution})))
    return cells


def ladder_repeat(config: RunConfig) -> list:
    """Fixed repeat R = 1..4, raising the query count when R x max_objects exceeds it."""
    max_objects = config.data.scene.max_objects
    cells = []
    for i, repeat in enumerate((1, 2, 3, 4)):
        queries = max(config.model.num_queries, repeat * max_objects)
        cells.append((f"{i:02d}-R{repeat}", {
            "model": {"label_aug": True, "num_queries": queries},
            "augment": {"mode": "repeat", "repeat": repeat},
        }))
    return cells


def ladder_ratio(config: RunConfig) -> list:
    return [(f"{i:02d}-r{ratio:.2f}", {"model": {"label_aug": True},
                                       "augment": {"mode": "ratio", "ratio": ratio}})
            for i, ratio in enumerate((0.1, 0.2, 0.25, 0.3, 0.4))]


def ladder_refine(config: RunConfig) -> list:
    """RoI sampling against box refinement, 2 x 2."""
    cells = []
    for sparse in (False, True):
        for refine in (False, True):
            cid = f"{len(cells):02d}-roi{int(sparse)}-refine{int(refine)}"
            cells.append((cid, _toggles({"sparse_sampling": sparse, "box_refine": refine})))
    return cells


def ladder_subsample(config: RunConfig) -> list:
    return [(f"{i:02d}-data{ratio:.2f}", {"data": {"subsample_ratio": ratio}})
            for i, ratio in enumerate((1.0, 0.5, 0.25, 0.1))]


LADDERS = {
    "components": ladder_components,
    "roi": ladder_roi,
    "repeat": ladder_repeat,
    "ratio": ladder_ratio,
    "refine": ladder_refine,
    "subsample": ladder_subsample,
}


def build_scenes(config: RunConfig) -> Tuple[list, list]:
    """Training scenes (subsampled under the run seed) and disjoint eval scenes."""
    data = config.data
    train = gen_dataset(data.scene, data.train_count)
    if data.subsample_ratio < 1.0:
        train = subsample(train, data.subsample_ratio, config.seed)
    held_out = gen_dataset(data.scene, data.eval_count, start=data.train_count)
    return train, held_out


class ExperimentOrchestrator:
    """
    Main orchestration pipeline for dedetr experiments.

    Args:
        config: Validated run configuration
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.aggregator = AblationAggregator()

    # -- train ----------------------------------------------------------------

    def train(self, out_dir=None, config: Optional[RunConfig] = None) -> TrainOutcome:
        """
        Train one model and write config.json, metrics.csv and checkpoints.

        Args:
            out_dir: Output directory (config.output_dir when None)
            config: Overrides self.config (used by ablation cells)

        Returns:
            TrainOutcome with per-epoch rows and the final evaluation
        """
        cfg = config or self.config
        out = Path(out_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        resolved = config_to_dict(cfg)
        (out / "config.json").write_text(json.dumps(resolved, indent=2), encoding="utf-8")

        train_scenes, eval_scenes = build_scenes(cfg)
        logger.info("training %s (seed %d) on %d scenes, eval on %d", cfg.config_id, cfg.seed,
                    len(train_scenes), len(eval_scenes))
        trainer = Trainer(cfg)
        history = trainer.fit(train_scenes, eval_scenes)
        rows = [m.as_row(cfg.config_id, cfg.seed) for m in history]
        metrics_path = write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)

        final_path = save_checkpoint(out / FINAL_CHECKPOINT, trainer.model, resolved)
        best_path = save_checkpoint(out / BEST_CHECKPOINT, trainer.best_state or
                                    trainer.model.state_dict(), resolved)
        return TrainOutcome(rows, trainer.last_result, metrics_path, final_path, best_path)

    # -- eval -----------------------------------------------------------------

    def load_model(self, checkpoint_path, use_embedded_config: bool = False):
        """Build a model from the run config (or the checkpoint's own) and load weights."""
        cfg = self.config
        if use_embedded_config:
            embedded = load_checkpoint(checkpoint_path).config
            if not embedded:
                raise ConfigError(f"checkpoint {checkpoint_path} carries no config")
            cfg = config_from_dict(embedded)
            self.config = cfg
        model = DetectionTransformer(cfg.model, cfg.seed)
        load_checkpoint(checkpoint_path, model)
        return model

    def evaluate_checkpoint(self, checkpoint_path, out_dir=None,
                            use_embedded_config: bool = False) -> EvalResult:
        """Evaluate a checkpoint on the held-out scenes; writes eval.json and eval.csv."""
        model = self.load_model(checkpoint_path, use_embedded_config)
        cfg = self.config
        _, eval_scenes = build_scenes(cfg)
        result = evaluate(model, eval_scenes, cfg.model.num_classes, cfg.model.label_aug,
                          cfg.nms_threshold)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "eval.json").write_text(format_json(result), encoding="utf-8")
            write_csv(out / "eval.csv", eval_rows([(cfg.config_id, result)]), EVAL_COLUMNS)
        return result

    def nms_sweep(self, checkpoint_path, thresholds: Sequence[float], out_dir=None,
                  use_embedded_config: bool = False) -> list:
        """
        Evaluate one checkpoint at every NMS threshold plus once without NMS.

        Returns:
            (threshold or None, EvalResult) pairs, thresholds first
        """
        model = self.load_model(checkpoint_path, use_embedded_config)
        cfg = self.config
        _, eval_scenes = build_scenes(cfg)
        results = []
        for threshold in list(thresholds) + [None]:
            result = evaluate(model, eval_scenes, cfg.model.num_classes, True, threshold)
            results.append((threshold, result))
            logger.info("nms %s: AP50 %.4f", "none" if threshold is None else threshold,
                        result.ap50)
        if out_dir is not None:
            write_csv(Path(out_dir) / "nms_sweep.csv", sweep_rows(results), SWEEP_COLUMNS)
        return results

    # -- ablate ---------------------------------------------------------------

    def ablation_cells(self) -> list:
        """(config_id, overrides) pairs from the explicit grid, else the named ladder."""
        ablation = self.config.ablation
        if ablation.grid:
            return [(cell["config_id"], cell.get("overrides", {})) for cell in ablation.grid]
        if ablation.ladder not in LADDERS:
            raise ConfigError(
                f"unknown ablation ladder '{ablation.ladder}'; choose from {sorted(LADDERS)}"
            )
        return LADDERS[ablation.ladder](self.config)

    def run_cell(self, config_id: str, overrides: dict, seed: int,
                 out_dir: Optional[Path] = None) -> CellResult:
        """Train and evaluate one (config, seed) cell."""
        cfg = with_overrides(self.config, {**overrides, "seed": seed, "config_id": config_id})
        cell_dir = (out_dir or Path(cfg.output_dir)) / "cells" / f"{config_id}-s{seed}"
        outcome = self.train(cell_dir, cfg)
        return CellResult(
            config_id=config_id,
            seed=seed,
            sf=cfg.model.sparse_sampling,
            ms=cfg.model.multiscale,
            la=cfg.model.label_aug,
            result=outcome.final,
            history=outcome.rows,
        )

    def ablate(self, seeds: Optional[Sequence[int]] = None, out_dir=None) -> AblationReport:
        """
        Run every (config, seed) cell in parallel worker threads.

        Output order is config_id then seed regardless of completion order.
        A failing cell is logged and its error re-raised once the pool drains.

        Returns:
            AblationReport; ablation.csv, ablation_summary.csv and
            ablation_metrics.csv are written to the output directory
        """
        seeds = list(seeds or self.config.ablation.seeds)
        out = Path(out_dir or self.config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cells = self.ablation_cells()
        # validate every cell before any training starts
        for config_id, overrides in cells:
            with_overrides(self.config, overrides)

        jobs = [(cid, ov, seed) for cid, ov in cells for seed in seeds]
        workers = min(worker_count(), len(jobs))
        logger.info("ablation: %d configs x %d seeds on %d workers", len(cells), len(seeds),
                    workers)

        done: List[CellResult] = []
        failures: Dict[tuple, BaseException] = {}
        with ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_cell = {
                executor.submit(self.run_cell, cid, ov, seed, out): (cid, seed)
                for cid, ov, seed in jobs
            }
            for future in as_completed(future_to_cell):
                key = future_to_cell[future]
                try:
                    result = future.result()
                except Exception as exc:
                    logger.error("ablation cell %s seed %d failed: %s", key[0], key[1], exc)
                    failures[key] = exc
                    continue
                done.append(result)
                logger.info("ablation cell %s seed %d: AP50 %.4f", key[0], key[1],
                            result.result.ap50)
        if failures:
            raise failures[min(failures)]

        report = self.aggregator.aggregate(done)
        write_csv(out / "ablation.csv", ablation_rows(report), ABLATION_COLUMNS)
        write_csv(out / "ablation_summary.csv", summary_rows(report.summary), SUMMARY_COLUMNS)
        write_csv(out / "ablation_metrics.csv",
                  [row for cell in report.cells for row in cell.history], METRIC_COLUMNS)
        return report
