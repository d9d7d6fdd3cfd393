"""CSV tables written by the pipeline commands."""
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from src.core.models.detection import Detection
from src.core.models.state import Trajectory
from src.core.services.metrics import CurvePoint, TrackingScores, TrackPoint, curve_frame
from src.core.services.mht import TrackReport
from src.utils.errors import ConfigError
from src.utils.logging import logger

STATE_COLUMNS = ["p_e", "p_n", "p_u", "v_e", "v_n", "v_u"]
_UPPER = list(zip(*np.triu_indices(6)))
COV_COLUMNS = [f"cov_{i}{j}" for i, j in _UPPER]


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Table not found: {path}")
    return pd.read_csv(path)


def trajectories_frame(trajectories: Sequence[Trajectory]) -> pd.DataFrame:
    frames = []
    for traj in trajectories:
        frame = pd.DataFrame(traj.states, columns=STATE_COLUMNS)
        frame.insert(0, "id", traj.object_id)
        frame.insert(0, "time", traj.times)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["time", "id", *STATE_COLUMNS])
    return pd.concat(frames, ignore_index=True)


def trajectories_from_frame(frame: pd.DataFrame) -> List[Trajectory]:
    out = []
    for object_id, group in frame.groupby("id", sort=True):
        group = group.sort_values("time")
        out.append(Trajectory(times=group["time"].to_numpy(), states=group[STATE_COLUMNS].to_numpy(),
                              object_id=int(object_id)))
    return out


def detections_frame(detections: Sequence[Detection]) -> pd.DataFrame:
    rows = [{
        "time": d.time,
        "range": d.range,
        "range_rate": d.range_rate,
        "score": d.score,
        "endo": bool(d.endo),
        "r_range": float(d.R[0, 0]),
        "r_cross": float(d.R[0, 1]),
        "r_range_rate": float(d.R[1, 1]),
    } for d in detections]
    return pd.DataFrame(rows, columns=["time", "range", "range_rate", "score", "endo", "r_range", "r_cross",
                                       "r_range_rate"])


def tracks_frame(reports: Sequence[TrackReport]) -> pd.DataFrame:
    """One row per reported track per scan: mean state and the 21 upper-triangular covariance entries."""
    rows = []
    for r in reports:
        row: Dict = {"time": r.time, "track_id": r.track_id, "status": r.status.value}
        row.update(zip(STATE_COLUMNS, map(float, r.mean)))
        row.update((name, float(r.cov[i, j])) for name, (i, j) in zip(COV_COLUMNS, _UPPER))
        rows.append(row)
    return pd.DataFrame(rows, columns=["time", "track_id", "status", *STATE_COLUMNS, *COV_COLUMNS])


def track_points_from_frame(frame: pd.DataFrame) -> List[TrackPoint]:
    return [TrackPoint(float(t), int(i), (float(e), float(n), float(u)))
            for t, i, e, n, u in frame[["time", "track_id", "p_e", "p_n", "p_u"]].itertuples(index=False)]


def curves_frame(points: Sequence[CurvePoint], detector: str) -> pd.DataFrame:
    frame = curve_frame(points)
    frame.insert(0, "detector", detector)
    return frame


def scores_frame(scores: TrackingScores, system: str) -> pd.DataFrame:
    return pd.DataFrame([{"system": system, **scores.as_row()}])


def loss_frame(curve: Sequence[float], start_epoch: int = 0) -> pd.DataFrame:
    return pd.DataFrame({"epoch": start_epoch + np.arange(len(curve)), "loss": np.asarray(curve, dtype=np.float64)})
