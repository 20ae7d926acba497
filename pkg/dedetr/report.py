"""
Ablation report engine for aggregating per-seed results of every grid cell.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .errors import ContractError
from .models import EvalResult

METRICS = ("ap", "ap50", "ap75")


@dataclass
class CellResult:
    """One trained-and-evaluated (config, seed) cell of an ablation grid."""
    config_id: str
    seed: int
    sf: bool
    ms: bool
    la: bool
    result: EvalResult
    history: list = field(default_factory=list)    # per-epoch metrics rows


@dataclass
class SummaryRow:
    """Mean and population std of each AP metric over the seeds of one config."""
    config_id: str
    n_seeds: int
    ap_mean: float
    ap_std: float
    ap50_mean: float
    ap50_std: float
    ap75_mean: float
    ap75_std: float


@dataclass
class AblationReport:
    cells: List[CellResult]
    summary: List[SummaryRow]

    @property
    def config_ids(self) -> List[str]:
        return [row.config_id for row in self.summary]


def summarize(config_id: str, results: Sequence[EvalResult]) -> SummaryRow:
    if not results:
        raise ContractError(f"config '{config_id}' has no seed results")
    stats = {}
    for name in METRICS:
        values = np.array([getattr(r, name) for r in results], dtype=np.float64)
        stats[f"{name}_mean"] = float(values.mean())
        stats[f"{name}_std"] = float(values.std())
    return SummaryRow(config_id=config_id, n_seeds=len(results), **stats)


def ablation_report(results: Mapping[str, Sequence[EvalResult]]) -> List[SummaryRow]:
    """
    Aggregate per-seed results per config.

    Args:
        results: config_id -> per-seed EvalResults (at least one each)

    Returns:
        One SummaryRow per config, ordered by config_id
    """
    return [summarize(cid, results[cid]) for cid in sorted(results)]


class AblationAggregator:
    """
    Collects cell results as they complete and orders them deterministically:
    config_id first, then seed, regardless of completion order.
    """

    def aggregate(self, cells: Sequence[CellResult]) -> AblationReport:
        """
        Args:
            cells: Completed cells in any order

        Returns:
            AblationReport with sorted per-seed cells and one summary row per config
        """
        seen = set()
        for cell in cells:
            key = (cell.config_id, cell.seed)
            if key in seen:
                raise ContractError(f"duplicate ablation cell {key}")
            seen.add(key)

        ordered = sorted(cells, key=lambda c: (c.config_id, c.seed))
        grouped: Dict[str, List[EvalResult]] = defaultdict(list)
        for cell in ordered:
            grouped[cell.config_id].append(cell.result)
        return AblationReport(cells=ordered, summary=ablation_report(grouped))
