"""Seed sweeps comparing the ML filter with the baseline filter, and the detector ordering check."""
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import pandas as pd
from rich.table import Table

from src.config.schemas import RunConfig
from src.core.services.metrics import TrackingScores
from src.processing.exports import write_csv
from src.processing.pipeline import OPERATING_POINT, Pipeline, console
from src.utils.errors import ConfigError
from src.utils.logging import logger

COMPARISON_CSV = "comparison.csv"


def ml_more_accurate(ml: TrackingScores, baseline: TrackingScores) -> bool:
    """Pure ML tracks (TrP = 1) localised no worse than the baseline's."""
    if ml.trp != 1.0 or math.isnan(ml.le_km):
        return False
    return math.isnan(baseline.le_km) or ml.le_km <= baseline.le_km


def ml_fewer_false_tracks(ml: TrackingScores, baseline: TrackingScores) -> bool:
    return ml.false_tracks < baseline.false_tracks


CRITERIA: Dict[str, Callable[[TrackingScores, TrackingScores], bool]] = {
    "accuracy": ml_more_accurate,
    "false-tracks": ml_fewer_false_tracks,
}


@dataclass(frozen=True)
class SeedOutcome:
    seed: int
    ml: TrackingScores
    baseline: TrackingScores
    ml_wins: bool


@dataclass(frozen=True)
class ComparisonReport:
    criterion: str
    outcomes: List[SeedOutcome]
    required: int

    @property
    def wins(self) -> int:
        return sum(o.ml_wins for o in self.outcomes)

    @property
    def passed(self) -> bool:
        return self.wins >= self.required

    def frame(self) -> pd.DataFrame:
        rows = []
        for o in self.outcomes:
            row = {"seed": o.seed, "criterion": self.criterion, "ml_wins": o.ml_wins}
            row.update({f"ml_{k}": v for k, v in o.ml.as_row().items()})
            row.update({f"baseline_{k}": v for k, v in o.baseline.as_row().items()})
            rows.append(row)
        return pd.DataFrame(rows)


def seed_config(cfg: RunConfig, seed: int) -> RunConfig:
    """The same run under another root seed, writing to <output_dir>/seeds/<seed>.

    Checkpoints stay where the original run trained them and an 'auto' UNet threshold is pinned to
    the original run's operating point.
    """
    source = Pipeline(cfg)
    artifacts = cfg.artifacts.model_copy(update={
        "unet_checkpoint": str(source.artifact(cfg.artifacts.unet_checkpoint).resolve()),
        "cvae_checkpoint": str(source.artifact(cfg.artifacts.cvae_checkpoint).resolve()),
    })
    tracker = cfg.tracker
    if cfg.detector == "unet":
        tracker = tracker.model_copy(update={"unet_threshold": source.unet_threshold()})
    return cfg.model_copy(update={
        "seed": seed,
        "output_dir": str(Path(cfg.output_dir) / "seeds" / str(seed)),
        "artifacts": artifacts,
        "tracker": tracker,
    })


def compare_trackers(
    ml_cfg: RunConfig,
    baseline_cfg: RunConfig,
    seeds: Sequence[int],
    criterion: str = "accuracy",
    required: int = 7
) -> ComparisonReport:
    """Track the same scenario with both filters under every seed and count the ML wins."""
    if criterion not in CRITERIA:
        raise ConfigError(f"Unknown criterion '{criterion}'; expected one of {sorted(CRITERIA)}")
    if ml_cfg.require_scenario() != baseline_cfg.require_scenario():
        raise ConfigError("ML and baseline runs must fly the same scenario")
    wins = CRITERIA[criterion]
    outcomes = []
    for seed in seeds:
        ml = Pipeline(seed_config(ml_cfg, seed)).track()
        baseline = Pipeline(seed_config(baseline_cfg, seed)).track()
        outcomes.append(SeedOutcome(seed, ml, baseline, wins(ml, baseline)))
        logger.info(f"Seed {seed}: ML {ml.as_row()} vs baseline {baseline.as_row()}")
    report = ComparisonReport(criterion, outcomes, required)

    write_csv(report.frame(), Path(ml_cfg.output_dir) / COMPARISON_CSV)
    table = Table(title=f"ML vs baseline ({criterion})")
    for name in ("seed", "ML TrP", "ML LE (km)", "Base LE (km)", "ML false", "Base false", "ML wins"):
        table.add_column(name, justify="right")
    for o in outcomes:
        table.add_row(str(o.seed), f"{o.ml.trp:.4f}", f"{o.ml.le_km:.4f}", f"{o.baseline.le_km:.4f}",
                      str(o.ml.false_tracks), str(o.baseline.false_tracks), "yes" if o.ml_wins else "no")
    console.print(table)
    logger.info(f"ML filter wins {report.wins}/{len(outcomes)} seeds on {criterion}; {required} required")
    return report


def detector_ordering_holds(summary: Dict[str, float]) -> bool:
    """UNet pixel TPR at the target FPR is at least the CFAR TPR at the same FPR."""
    if "unet_tpr_at_target_fpr" not in summary:
        raise ConfigError("No UNet curve in the detection summary; run eval-detect with detector 'unet'")
    return summary["unet_tpr_at_target_fpr"] >= summary["cfar_tpr_at_target_fpr"]


def check_detector_ordering(cfg: RunConfig) -> bool:
    path = Pipeline(cfg).artifact(OPERATING_POINT)
    if not path.exists():
        raise ConfigError(f"{path} does not exist; run eval-detect first")
    summary = json.loads(path.read_text(encoding="utf-8"))
    holds = detector_ordering_holds(summary)
    logger.info(
        f"TPR at FPR {summary['target_fpr']:g}: UNet {summary['unet_tpr_at_target_fpr']:.4f}, "
        f"CFAR {summary['cfar_tpr_at_target_fpr']:.4f} ({'holds' if holds else 'fails'})"
    )
    return holds
