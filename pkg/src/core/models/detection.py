from dataclasses import dataclass, field
from typing import List, Optional, Tuple
import numpy as np


@dataclass(frozen=True)
class Detection:
    """A (range, range-rate) report handed to the tracker, with its 2x2 measurement covariance."""
    time: float
    range: float
    range_rate: float
    score: float
    R: np.ndarray
    endo: bool = False
    snr: Optional[float] = None
    pixel: Tuple[int, int] = (-1, -1)

    @property
    def z(self) -> np.ndarray:
        return np.array([self.range, self.range_rate], dtype=np.float64)


@dataclass(frozen=True)
class SubpixelDetection:
    range: float
    range_rate: float
    score: float
    pixel: Tuple[int, int]
    features: np.ndarray
    endo: bool = False


@dataclass(frozen=True)
class CfarHit:
    row: int
    col: int
    statistic: float


@dataclass
class CfarDetectionList:
    hits: List[CfarHit] = field(default_factory=list)
    threshold: float = 0.0

    @property
    def fpr(self) -> float:
        """Per-pixel false-alarm probability implied by the threshold (chi-squared, 2 dof)."""
        return float(np.exp(-self.threshold / 2.0))

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)


@dataclass
class DetectionMap:
    """Target-class probabilities (h, w) and penultimate features (h, w, F) for one image."""
    probabilities: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.shape[:2] != self.probabilities.shape:
            raise ValueError(
                f"Feature map {self.features.shape} does not match probabilities {self.probabilities.shape}"
            )
