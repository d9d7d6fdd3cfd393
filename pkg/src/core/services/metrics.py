"""Detection curves and track-to-truth scores for completed runs."""
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from src.core.models.state import Trajectory
from src.utils.errors import DomainError, ShapeError
from src.utils.logging import logger

_TIME_DECIMALS = 6


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    tpr: float
    fpr: float
    precision: float
    recall: float


@dataclass(frozen=True)
class TrackingScores:
    tac: float
    trc: float
    tap: float
    trp: float
    le_km: float
    false_tracks: int = 0

    def as_row(self) -> Dict[str, float]:
        return {"TaC": self.tac, "TrC": self.trc, "TaP": self.tap, "TrP": self.trp, "LE_km": self.le_km,
                "false_tracks": self.false_tracks}


@dataclass(frozen=True)
class TrackPoint:
    time: float
    track_id: int
    position: Tuple[float, float, float]


def _split_scores(
    scores: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    tol: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-label neighbourhood maxima and the scores of pixels outside every label neighbourhood."""
    if len(scores) != len(labels):
        raise ShapeError(f"{len(scores)} score maps but {len(labels)} label masks")
    footprint = np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool)
    positives, negatives = [], []
    for score, mask in zip(scores, labels):
        score = np.asarray(score, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if score.shape != mask.shape:
            raise ShapeError(f"Score map {score.shape} does not match label mask {mask.shape}")
        if tol > 0:
            nearby = ndimage.maximum_filter(score, footprint=footprint, mode="constant", cval=-np.inf)
            covered = ndimage.binary_dilation(mask, structure=footprint)
        else:
            nearby, covered = score, mask
        positives.append(nearby[mask])
        negatives.append(score[~covered])
    return np.concatenate(positives), np.concatenate(negatives)


def default_thresholds(scores: Sequence[np.ndarray], num: int = 200) -> np.ndarray:
    """Quantiles of the pooled scores, so heavy-tailed statistic maps get usable resolution."""
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in scores])
    return np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, num)))


def roc_pr(
    scores: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    thresholds: Optional[Sequence[float]] = None,
    tol: int = 1
) -> List[CurvePoint]:
    """Confusion counts per threshold with a Chebyshev bleed tolerance of `tol` pixels.

    A label counts as found at threshold t when any score in its neighbourhood reaches t; pixels
    inside a label neighbourhood are never negatives.
    """
    if tol < 0:
        raise ValueError(f"Bleed tolerance must be non-negative, got {tol}")
    pos, neg = _split_scores(scores, labels, tol)
    thresholds = np.sort(np.asarray(
        default_thresholds(scores) if thresholds is None else thresholds, dtype=np.float64))
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, thresholds, side="left")

    points = []
    for t, tp_k, fp_k in zip(thresholds, tp, fp):
        tpr = tp_k / len(pos_sorted) if len(pos_sorted) else 0.0
        fpr = fp_k / len(neg_sorted) if len(neg_sorted) else 0.0
        precision = tp_k / (tp_k + fp_k) if tp_k + fp_k else 1.0
        points.append(CurvePoint(threshold=float(t), tpr=float(tpr), fpr=float(fpr),
                                 precision=float(precision), recall=float(tpr)))
    logger.info(f"ROC over {len(points)} thresholds: {len(pos)} labels, {len(neg)} negative pixels")
    return points


def _roc_arrays(points: Sequence[CurvePoint]) -> Tuple[np.ndarray, np.ndarray]:
    fpr = np.array([0.0] + [p.fpr for p in points] + [1.0])
    tpr = np.array([0.0] + [p.tpr for p in points] + [1.0])
    order = np.lexsort((tpr, fpr))
    return fpr[order], tpr[order]


def auc(points: Sequence[CurvePoint]) -> float:
    fpr, tpr = _roc_arrays(points)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def tpr_at_fpr(points: Sequence[CurvePoint], fpr: float) -> float:
    """Linear interpolation of the ROC at a false positive rate."""
    x, y = _roc_arrays(points)
    # Duplicate FPR values keep the best TPR.
    unique_x, first = np.unique(x, return_index=True)
    best = np.maximum.reduceat(y, first)
    return float(np.interp(fpr, unique_x, best))


def curve_frame(points: Sequence[CurvePoint]) -> pd.DataFrame:
    return pd.DataFrame([asdict(p) for p in points], columns=["threshold", "tpr", "fpr", "precision", "recall"])


def precision_recall_vs_threshold(points: Sequence[CurvePoint]) -> pd.DataFrame:
    return curve_frame(points)[["threshold", "precision", "recall"]]


def match_operating_point(
    unet_points: Sequence[CurvePoint],
    cfar_points: Sequence[CurvePoint],
    cfar_threshold: float
) -> Dict[str, float]:
    """UNet threshold whose recall is closest to the CFAR recall at `cfar_threshold`."""
    if not unet_points or not cfar_points:
        raise ValueError("Both curves need at least one point")
    ordered = sorted(cfar_points, key=lambda p: p.threshold)
    cfar_t = np.array([p.threshold for p in ordered])
    cfar_r = np.array([p.recall for p in ordered])
    target = float(np.interp(cfar_threshold, cfar_t, cfar_r))
    best = min(unet_points, key=lambda p: (abs(p.recall - target), -p.threshold))
    return {"unet_threshold": best.threshold, "unet_recall": best.recall,
            "cfar_threshold": float(cfar_threshold), "cfar_recall": target}


def _time_key(t: float) -> float:
    return round(float(t), _TIME_DECIMALS)


def tracking_scores(
    tracks: Sequence[TrackPoint],
    truths: Sequence[Trajectory],
    association_distance: float = 50.0
) -> TrackingScores:
    """Score track points against truth trajectories with a gated assignment at every time step."""
    if not truths or all(len(t) == 0 for t in truths):
        raise DomainError("Tracking scores need at least one truth point")

    truth_by_time: Dict[float, List[Tuple[int, np.ndarray]]] = defaultdict(list)
    for traj in truths:
        for t, state in zip(traj.times, traj.states):
            truth_by_time[_time_key(t)].append((traj.object_id, state[:3]))
    track_by_time: Dict[float, List[Tuple[int, np.ndarray]]] = defaultdict(list)
    for p in tracks:
        track_by_time[_time_key(p.time)].append((p.track_id, np.asarray(p.position, dtype=np.float64)))

    truth_points = sum(len(v) for v in truth_by_time.values())
    track_points = Counter(p.track_id for p in tracks)
    pair_counts: Dict[int, Counter] = defaultdict(Counter)
    truth_assigned: Dict[int, Counter] = defaultdict(Counter)
    errors: List[float] = []

    for t, truth_here in truth_by_time.items():
        track_here = track_by_time.get(t, [])
        if not track_here:
            continue
        a = np.array([pos for _, pos in truth_here])
        b = np.array([pos for _, pos in track_here])
        dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        cost = np.where(dist <= association_distance, dist, 1e12)
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            if dist[i, j] > association_distance:
                continue
            truth_id, track_id = truth_here[i][0], track_here[j][0]
            pair_counts[track_id][truth_id] += 1
            truth_assigned[truth_id][track_id] += 1
            errors.append(float(dist[i, j]))

    tac = len(errors) / truth_points
    dominant = [max(pair_counts[tid].values(), default=0) / n for tid, n in track_points.items()]
    trc = float(np.mean([d > 0.5 for d in dominant])) if dominant else 0.0
    # Tracks never held by one truth for most of their points.
    false_tracks = sum(d <= 0.5 for d in dominant)
    trp = float(np.mean(dominant)) if dominant else 0.0
    purities = [max(c.values()) / sum(c.values()) for c in truth_assigned.values() if c]
    tap = float(np.mean(purities)) if purities else 0.0
    le_km = float(np.mean(errors)) / 1000.0 if errors else math.nan

    scores = TrackingScores(tac=tac, trc=trc, tap=tap, trp=trp, le_km=le_km, false_tracks=int(false_tracks))
    logger.info(f"Tracking scores over {truth_points} truth points and {len(track_points)} tracks: {scores}")
    return scores
