from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np

from src.core.models.state import EnuState


@dataclass(frozen=True)
class RadarMetadata:
    aim_azimuth: float
    platform: EnuState
    snr_ref: float
    wavelength: float
    bandwidth: float
    n_pulse: int
    t_pri: float
    l_az: float
    l_el: float
    beamwidth: float
    broadside_azimuth: float
    endo_width_bins: int
    time: float = 0.0


@dataclass
class RdmImage:
    """h x w x m complex range-Doppler map; rows are range bins, columns range-rate bins."""
    values: np.ndarray
    range_bins: np.ndarray
    doppler_bins: np.ndarray
    endo_mask: np.ndarray
    metadata: RadarMetadata

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"RDM values must be h x w x m, got shape {self.values.shape}")
        h, w, _ = self.values.shape
        if self.range_bins.shape != (h,) or self.doppler_bins.shape != (w,):
            raise ValueError(
                f"Bin grids {self.range_bins.shape}/{self.doppler_bins.shape} do not match image {h}x{w}"
            )
        if np.any(np.diff(self.range_bins) <= 0) or np.any(np.diff(self.doppler_bins) <= 0):
            raise ValueError("Bin grids must be strictly increasing")
        if self.endo_mask.shape != (h, w):
            raise ValueError(f"endo_mask shape {self.endo_mask.shape} does not match image {h}x{w}")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TargetReturn:
    """One target as seen by the sensor at a single time step."""
    range: float
    range_rate: float
    snr: float
    azimuth: float
    target_id: int = -1


@dataclass(frozen=True)
class LabeledTarget:
    range: float
    range_rate: float
    snr: float
    row: int
    col: int
    target_id: int = -1


@dataclass
class LabelSet:
    mask: np.ndarray
    targets: List[LabeledTarget] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.targets)


@dataclass
class SynthesisReport:
    dropped: List[TargetReturn] = field(default_factory=list)
    reasons: List[str] = field(default_factory=list)
    injected_energy: float = 0.0

    def drop(self, target: TargetReturn, reason: str):
        self.dropped.append(target)
        self.reasons.append(reason)


@dataclass
class NoiseModel:
    """Diagonal per-channel noise power."""
    variances: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not self.degenerate and np.any(self.variances <= 0):
            raise ValueError(f"Noise variances must be positive, got {self.variances}")

    @property
    def m(self) -> int:
        return len(self.variances)

    @property
    def mean_power(self) -> float:
        return float(np.mean(self.variances))


@dataclass
class ClutterModel:
    """Per-pixel m x m Hermitian PSD clutter covariances; exactly zero outside the endo mask."""
    covariances: np.ndarray
    endo_mask: np.ndarray

    def __post_init__(self):
        if self.covariances.ndim != 4 or self.covariances.shape[2] != self.covariances.shape[3]:
            raise ValueError(f"Clutter covariances must be h x w x m x m, got {self.covariances.shape}")
        if self.covariances.shape[:2] != self.endo_mask.shape:
            raise ValueError("Clutter covariance grid does not match endo mask")

    @property
    def m(self) -> int:
        return self.covariances.shape[2]

    @classmethod
    def zeros(cls, h: int, w: int, m: int, endo_mask: Optional[np.ndarray] = None) -> "ClutterModel":
        mask = np.zeros((h, w), dtype=bool) if endo_mask is None else endo_mask
        return cls(np.zeros((h, w, m, m), dtype=np.complex128), mask)
