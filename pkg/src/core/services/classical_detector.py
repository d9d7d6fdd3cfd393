"""STAP whitening followed by the adaptive matched-filter CFAR test."""
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from src.core.models.detection import CfarDetectionList, CfarHit
from src.core.models.radar import ClutterModel, NoiseModel, RdmImage
from src.core.services.sensor import estimate_clutter_cov, estimate_noise_cov, steering_vector
from src.utils.errors import NumericalError
from src.utils.logging import logger

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _pixel_covariances(clutter: ClutterModel, noise: NoiseModel, loading: float) -> np.ndarray:
    cov = clutter.covariances + np.diag(noise.variances)[None, None, :, :]
    m = cov.shape[-1]
    delta = loading * np.real(np.trace(cov, axis1=-2, axis2=-1)) / m
    return cov + delta[..., None, None] * np.eye(m)


def _whiten(image: RdmImage, clutter: ClutterModel, noise: NoiseModel, loading: float,
            extra: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    h, w, m = image.values.shape
    if clutter.covariances.shape != (h, w, m, m) or noise.m != m:
        raise ValueError(
            f"Covariance models {clutter.covariances.shape}/{noise.m} do not cover image {h}x{w}x{m}"
        )
    cov = _pixel_covariances(clutter, noise, loading)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        bad = np.linalg.eigvalsh(cov).min()
        logger.error(f"STAP covariance is not positive definite (min eigenvalue {bad:.3e})")
        raise NumericalError(f"STAP covariance is not positive definite: {e}")

    rhs = image.values.astype(np.complex128)[..., None]
    if extra is not None:
        rhs = np.concatenate([rhs, np.broadcast_to(extra, (h, w, m))[..., None]], axis=-1)
    solved = np.linalg.solve(chol, rhs)
    if extra is None:
        return solved[..., 0], None
    return solved[..., 0], solved[..., 1]


def stap_whiten(image: RdmImage, clutter: ClutterModel, noise: NoiseModel, loading: float = 1e-3) -> np.ndarray:
    """Multiply every pixel vector by the inverse Cholesky factor of its loaded covariance."""
    whitened, _ = _whiten(image, clutter, noise, loading)
    return whitened


def cfar_statistic(y: np.ndarray, t: Optional[np.ndarray] = None) -> np.ndarray:
    """2|t^H y|^2 / |t|^2 over the last axis; chi-squared with 2 dof for white unit-power noise."""
    y = np.asarray(y)
    if t is None:
        t = np.ones(y.shape[-1], dtype=np.complex128)
    num = np.abs(np.sum(np.conj(t) * y, axis=-1)) ** 2
    den = np.sum(np.abs(t) ** 2, axis=-1)
    return 2.0 * num / den


def false_alarm_rate(threshold: float) -> float:
    return math.exp(-threshold / 2.0)


def statistic_map(image: RdmImage, clutter: ClutterModel, noise: NoiseModel, loading: float = 1e-3) -> np.ndarray:
    """Per-pixel CFAR statistic with the steering vector matched to the beam aim."""
    meta = image.metadata
    steering = steering_vector(image.m, meta.aim_azimuth, meta.broadside_azimuth)
    y, t = _whiten(image, clutter, noise, loading, extra=steering)
    return cfar_statistic(y, t)


def cfar_detect(
    image: RdmImage,
    clutter: ClutterModel,
    noise: NoiseModel,
    threshold: float,
    loading: float = 1e-3
) -> CfarDetectionList:
    if threshold < 0:
        raise ValueError(f"CFAR threshold must be non-negative, got {threshold}")
    stat = statistic_map(image, clutter, noise, loading)
    rows, cols = np.nonzero(stat >= threshold)
    hits = [CfarHit(int(r), int(c), float(stat[r, c])) for r, c in zip(rows, cols)]
    return CfarDetectionList(hits=hits, threshold=threshold)


def cfar_peaks(stat: np.ndarray, threshold: float) -> List[CfarHit]:
    """One hit per 8-connected group of threshold crossings, at the group's peak pixel."""
    labelled, count = ndimage.label(stat >= threshold, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    peaks = ndimage.maximum_position(stat, labels=labelled, index=np.arange(1, count + 1))
    hits = [CfarHit(int(r), int(c), float(stat[r, c])) for r, c in peaks]
    return sorted(hits, key=lambda hit: (hit.row, hit.col))


def calibrated_snr(statistic: float, m: int, floor: float) -> float:
    """Invert E[stat] = 2 (1 + m * snr) for a unit-modulus steering vector in whitened noise."""
    return max((statistic / 2.0 - 1.0) / m, floor)


class CfarDetector:
    """Classical detector: estimate (or take) the sensor models, whiten, threshold."""

    def __init__(self, threshold: float, window_half_width: int, loading: float = 1e-3):
        self.threshold = threshold
        self.window_half_width = window_half_width
        self.loading = loading

    def models(self, image: RdmImage) -> Tuple[ClutterModel, NoiseModel]:
        noise = estimate_noise_cov(image)
        if noise.degenerate:
            raise NumericalError("Noise estimate is degenerate; cannot whiten the image")
        clutter = estimate_clutter_cov(image, self.window_half_width, noise)
        return clutter, noise

    def score_map(self, image: RdmImage, models: Optional[Tuple[ClutterModel, NoiseModel]] = None) -> np.ndarray:
        clutter, noise = models if models is not None else self.models(image)
        return statistic_map(image, clutter, noise, self.loading)

    def detect(self, image: RdmImage, models: Optional[Tuple[ClutterModel, NoiseModel]] = None) -> List[CfarHit]:
        return cfar_peaks(self.score_map(image, models), self.threshold)
