"""Extended Kalman filtering of ENU target states from radar detections."""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from src.core.models.radar import RadarMetadata
from src.core.models.state import EnuState, MotionModel
from src.core.services.geometry import jacobian, measure_array, point_on_ray, wrap_angle
from src.utils.errors import DomainError, NumericalError

RANGE_ROWS = (0, 1)
AZIMUTH_ROW = 2


class TrackStatus(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass(frozen=True)
class BaselineCovarianceParams:
    snr: float
    c: float
    bandwidth: float
    wavelength: float
    n_pulse: int
    t_pri: float
    l_az: float
    l_el: float

    @classmethod
    def from_metadata(cls, metadata: RadarMetadata, snr: float, c: float = 299_792_458.0):
        return cls(snr=snr, c=c, bandwidth=metadata.bandwidth, wavelength=metadata.wavelength,
                   n_pulse=metadata.n_pulse, t_pri=metadata.t_pri, l_az=metadata.l_az, l_el=metadata.l_el)


def baseline_R(params: BaselineCovarianceParams) -> np.ndarray:
    """Diagonal (range, range-rate, azimuth, elevation) covariance from SNR and waveform parameters."""
    values = (params.snr, params.c, params.bandwidth, params.wavelength, params.n_pulse, params.t_pri,
              params.l_az, params.l_el)
    if any(not v > 0 for v in values):
        raise DomainError(f"Baseline covariance parameters must be positive: {params}")
    scale = 3.0 / (4.0 * params.snr)
    lam2 = params.wavelength ** 2
    dwell = params.n_pulse * params.t_pri
    return np.diag([
        scale * params.c ** 2 / (4.0 * params.bandwidth ** 2),
        scale * lam2 / (4.0 * dwell ** 2),
        scale * lam2 / params.l_az ** 2,
        scale * lam2 / params.l_el ** 2,
    ])


@dataclass(frozen=True)
class TrackAnchor:
    """First position fix of a tentative track, kept until a second report allows differencing."""
    position: np.ndarray
    cov: np.ndarray
    time: float


@dataclass
class Track:
    id: int
    mean: np.ndarray
    cov: np.ndarray
    time: float
    score: float = 0.0
    history: Tuple[bool, ...] = ()
    misses: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    anchor: Optional[TrackAnchor] = None

    @property
    def state(self) -> EnuState:
        return EnuState.from_array(self.mean)

    @property
    def alive(self) -> bool:
        return self.status is not TrackStatus.DELETED


@dataclass(frozen=True)
class Innovation:
    nu: np.ndarray
    S: np.ndarray
    H: np.ndarray
    d2: float
    log_det_2pi_s: float = field(default=0.0)


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def ekf_predict(track: Track, model: MotionModel, time: Optional[float] = None) -> Track:
    mean = model.phi @ track.mean
    cov = _symmetrize(model.phi @ track.cov @ model.phi.T + model.q)
    return replace(track, mean=mean, cov=cov, time=track.time + model.dt if time is None else time)


def innovation(
    track: Track,
    z: np.ndarray,
    R: np.ndarray,
    platform: EnuState,
    rows: Sequence[int] = RANGE_ROWS
) -> Innovation:
    rows = list(rows)
    z = np.asarray(z, dtype=np.float64).reshape(len(rows))
    H = jacobian(track.state, platform)[rows]
    nu = z - measure_array(track.state, platform)[rows]
    if AZIMUTH_ROW in rows:
        k = rows.index(AZIMUTH_ROW)
        nu[k] = wrap_angle(nu[k])
    S = _symmetrize(H @ track.cov @ H.T + np.asarray(R, dtype=np.float64))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"Singular innovation covariance for track {track.id} at t={track.time}: "
            f"S={S.tolist()}, eigenvalues={np.linalg.eigvalsh(S).tolist()}"
        )
    w = np.linalg.solve(L, nu)
    log_det = 2.0 * float(np.sum(np.log(np.diag(L)))) + len(rows) * math.log(2.0 * math.pi)
    return Innovation(nu=nu, S=S, H=H, d2=float(w @ w), log_det_2pi_s=log_det)


def ekf_update(
    track: Track,
    z: np.ndarray,
    R: np.ndarray,
    platform: EnuState,
    rows: Sequence[int] = RANGE_ROWS
) -> Tuple[Track, Innovation]:
    """Joseph-form update with the selected rows of the measurement Jacobian."""
    inn = innovation(track, z, R, platform, rows)
    R = np.asarray(R, dtype=np.float64)
    K = np.linalg.solve(inn.S, inn.H @ track.cov).T
    I_KH = np.eye(6) - K @ inn.H
    cov = _symmetrize(I_KH @ track.cov @ I_KH.T + K @ R @ K.T)
    return replace(track, mean=track.mean + K @ inn.nu, cov=cov), inn


def gate_threshold(probability: float = 0.99, dim: int = 2) -> float:
    return float(chi2.ppf(probability, dim))


def gate(
    track: Track,
    z: np.ndarray,
    R: np.ndarray,
    platform: EnuState,
    probability: float = 0.99,
    rows: Sequence[int] = RANGE_ROWS
) -> bool:
    return innovation(track, z, R, platform, rows).d2 <= gate_threshold(probability, len(list(rows)))


def _ray_fix(platform: EnuState, aim_azimuth: float, beamwidth: float, z: np.ndarray, R: np.ndarray,
             altitude: float):
    rng_m = float(z[0])
    pos = point_on_ray(platform, aim_azimuth, rng_m, altitude)
    d = pos - platform.position
    los = d / np.linalg.norm(d)
    horiz = np.hypot(los[0], los[1])
    along = np.array([math.sin(aim_azimuth), math.cos(aim_azimuth), 0.0])
    cross = np.array([math.cos(aim_azimuth), -math.sin(aim_azimuth), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    range_var = float(R[0, 0]) / horiz ** 2
    cross_std = rng_m * horiz * beamwidth / math.sqrt(12.0)
    pos_cov = range_var * np.outer(along, along) + cross_std ** 2 * np.outer(cross, cross) + np.outer(up, up)
    return pos, pos_cov, los, horiz, (along, cross, up)


def initial_state(
    platform: EnuState,
    aim_azimuth: float,
    beamwidth: float,
    z: np.ndarray,
    R: np.ndarray,
    velocity_std: float,
    altitude: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Seed a 6-state from one (range, range-rate) report on the beam-center ray.

    Position sits at the measured range along the aim azimuth with cross-range spread over the
    beam; the velocity component along the horizontal line of sight comes from the range-rate.
    """
    pos, pos_cov, los, horiz, (along, cross, up) = _ray_fix(platform, aim_azimuth, beamwidth, z, R, altitude)
    rr = float(z[1])
    radial_speed = (rr + float(los @ platform.velocity)) / horiz
    vel = along * radial_speed

    radial_var = float(R[1, 1]) / horiz ** 2 + 1.0
    vel_cov = radial_var * np.outer(along, along) + velocity_std ** 2 * np.outer(cross, cross) \
        + 0.01 * np.outer(up, up)

    cov = np.zeros((6, 6))
    cov[:3, :3] = pos_cov
    cov[3:, 3:] = vel_cov
    return np.concatenate([pos, vel]), cov


def two_point_state(
    anchor: TrackAnchor,
    platform: EnuState,
    aim_azimuth: float,
    beamwidth: float,
    z: np.ndarray,
    R: np.ndarray,
    time: float,
    velocity_std: float,
    altitude: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Seed a 6-state by differencing two beam-ray position fixes taken at different revisits.

    The differenced velocity is shrunk toward a zero-mean prior with `velocity_std` on the ground
    axes, so directions the two fixes barely resolve (cross-range) stay near zero with a wide
    variance. The range-rate of the second report is not used here.
    """
    dt = time - anchor.time
    if not dt > 0:
        raise DomainError(f"Two-point initiation needs increasing times, got {anchor.time} then {time}")
    pos, pos_cov, *_ = _ray_fix(platform, aim_azimuth, beamwidth, z, R, altitude)
    v_diff = (pos - anchor.position) / dt
    V_diff = (anchor.cov + pos_cov) / dt ** 2
    V_prior = np.diag([velocity_std ** 2, velocity_std ** 2, 0.01])
    G = np.linalg.solve((V_prior + V_diff).T, V_prior.T).T
    I_G = np.eye(3) - G
    vel = G @ v_diff
    vel_cov = G @ V_diff @ G.T + I_G @ V_prior @ I_G.T

    cov = np.zeros((6, 6))
    cov[:3, :3] = pos_cov
    cov[:3, 3:] = pos_cov @ G.T / dt
    cov[3:, :3] = cov[:3, 3:].T
    cov[3:, 3:] = _symmetrize(vel_cov)
    return np.concatenate([pos, vel]), _symmetrize(cov)


def false_alarm_density(per_pixel_rate: float, h: int, w: int, area: float) -> float:
    """Expected false alarms per scan spread over the (range, range-rate) area of the grid."""
    if per_pixel_rate <= 0 or area <= 0:
        raise DomainError(f"False alarm rate {per_pixel_rate} and grid area {area} must be positive")
    return per_pixel_rate * h * w / area
