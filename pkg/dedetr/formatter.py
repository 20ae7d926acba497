import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from termcolor import colored

from .models import EvalResult
from .report import AblationReport, SummaryRow

ABLATION_COLUMNS = ("config_id", "sf", "ms", "la", "seed", "ap", "ap50", "ap75")
SUMMARY_COLUMNS = ("config_id", "n_seeds", "ap_mean", "ap_std", "ap50_mean", "ap50_std",
                   "ap75_mean", "ap75_std")
EVAL_COLUMNS = ("label", "ap", "ap50", "ap75", "num_scenes", "num_ground_truth",
                "num_detections")
SWEEP_COLUMNS = ("nms_threshold", "ap", "ap50", "ap75", "num_detections")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    """Render rows as CSV with a fixed column order and fixed float precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_csv(rows, columns), encoding="utf-8")
    return path


def eval_to_dict(result: EvalResult) -> dict:
    return {
        "ap": result.ap,
        "ap50": result.ap50,
        "ap75": result.ap75,
        "per_class_ap": {str(c): v for c, v in sorted(result.per_class_ap.items())},
        "num_scenes": result.num_scenes,
        "num_ground_truth": result.num_ground_truth,
        "num_detections": result.num_detections,
    }


def format_json(result: EvalResult) -> str:
    """Format an evaluation result into JSON."""
    return json.dumps(eval_to_dict(result), indent=4)


def eval_rows(results: Sequence[tuple]) -> list:
    """(label, EvalResult) pairs -> CSV rows for EVAL_COLUMNS."""
    return [{"label": label, **{k: v for k, v in eval_to_dict(r).items() if k != "per_class_ap"}}
            for label, r in results]


def sweep_rows(results: Sequence[tuple]) -> list:
    """(threshold or None, EvalResult) pairs -> rows; None renders as "none"."""
    return [{"nms_threshold": "none" if t is None else f"{t:.2f}", "ap": r.ap, "ap50": r.ap50,
             "ap75": r.ap75, "num_detections": r.num_detections} for t, r in results]


def ablation_rows(report: AblationReport) -> list:
    return [{"config_id": c.config_id, "sf": c.sf, "ms": c.ms, "la": c.la, "seed": c.seed,
             "ap": c.result.ap, "ap50": c.result.ap50, "ap75": c.result.ap75}
            for c in report.cells]


def summary_rows(rows: Sequence[SummaryRow]) -> list:
    return [{c: getattr(row, c) for c in SUMMARY_COLUMNS} for row in rows]


def _ap_color(value: float) -> str:
    if value >= 0.5:
        return "green"
    if value >= 0.2:
        return "yellow"
    return "red"


def format_terminal(result: EvalResult, title: str = "Evaluation") -> str:
    """Format an evaluation result into colored terminal output."""
    lines = [colored(title, "cyan", attrs=["bold"])]
    for name in ("ap", "ap50", "ap75"):
        value = getattr(result, name)
        lines.append(f"  {name.upper():<5} " + colored(f"{value:.4f}", _ap_color(value)))
    if result.per_class_ap:
        lines.append("  per class:")
        for c, value in sorted(result.per_class_ap.items()):
            lines.append(f"    class {c}: " + colored(f"{value:.4f}", _ap_color(value)))
    lines.append(f"  scenes {result.num_scenes}, ground truth {result.num_ground_truth}, "
                 f"detections {result.num_detections}")
    return "\n".join(lines) + "\n"


def format_epoch(row: dict) -> str:
    return (f"epoch {row['epoch']:>3}  loss {row['loss_total']:.4f}  "
            + colored(f"AP50 {row['ap50']:.4f}", _ap_color(row["ap50"])))


def format_summary(rows: Sequence[SummaryRow]) -> str:
    """Colored ablation summary table, one line per config."""
    width = max([len(r.config_id) for r in rows] + [9])
    lines = [colored(f"{'config_id':<{width}}  seeds  AP              AP50            AP75",
                     "cyan", attrs=["bold"])]
    for r in rows:
        cells = [colored(f"{m:.4f}±{s:.4f}", _ap_color(m)) for m, s in
                 ((r.ap_mean, r.ap_std), (r.ap50_mean, r.ap50_std), (r.ap75_mean, r.ap75_std))]
        lines.append(f"{r.config_id:<{width}}  {r.n_seeds:>5}  " + "   ".join(cells))
    return "\n".join(lines) + "\n"

