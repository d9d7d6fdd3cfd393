"""RDM synthesis and sensor-model estimation."""
import math
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np

from src.config.schemas import DatasetConfig, SensorConfig
from src.core.models.radar import (
    ClutterModel,
    LabeledTarget,
    LabelSet,
    NoiseModel,
    RadarMetadata,
    RdmImage,
    SynthesisReport,
    TargetReturn,
)
from src.core.models.state import EnuState
from src.core.services.geometry import ground_clutter_range_rate
from src.core.services.scenario import beam_gain
from src.utils.errors import EstimationError
from src.utils.logging import logger

SPEED_OF_LIGHT = 299_792_458.0


def range_grid(cfg: SensorConfig) -> np.ndarray:
    return cfg.range_start + np.arange(cfg.h) * SPEED_OF_LIGHT / (2.0 * cfg.bandwidth)


def doppler_grid(cfg: SensorConfig) -> np.ndarray:
    """Range-rate bin centers; zero Doppler sits at column w // 2."""
    resolution = cfg.wavelength / (2.0 * cfg.n_pulse * cfg.t_pri)
    return (np.arange(cfg.w) - cfg.w // 2) * resolution


def steering_vector(m: int, azimuth: float, broadside: float) -> np.ndarray:
    """Ideal half-wavelength array phase ramp across the m channels."""
    return np.exp(1j * np.pi * np.arange(m) * math.sin(azimuth - broadside))


def endo_region(metadata: RadarMetadata, doppler_bins: np.ndarray, h: int) -> np.ndarray:
    """Boolean h x w mask of the Doppler band holding ground clutter."""
    w = len(doppler_bins)
    mask = np.zeros((h, w), dtype=bool)
    width = metadata.endo_width_bins
    if width <= 0:
        return mask
    center_rr = ground_clutter_range_rate(metadata.platform, metadata.aim_azimuth)
    center = int(np.argmin(np.abs(doppler_bins - center_rr)))
    lo = max(center - width // 2, 0)
    hi = min(lo + width, w)
    mask[:, lo:hi] = True
    return mask


def parametric_noise(cfg: SensorConfig) -> NoiseModel:
    return NoiseModel(np.asarray(cfg.noise_variances, dtype=np.float64))


def parametric_clutter(
    cfg: SensorConfig,
    endo_mask: np.ndarray,
    range_bins: np.ndarray,
    noise: NoiseModel
) -> ClutterModel:
    """Clutter band with range-decaying power and correlated channels.

    Sigma_ab = P(r) * rho^|a-b| * exp(i psi_j (a-b)), where psi_j is a spatial phase that
    sweeps across the Doppler band.
    """
    h, w = endo_mask.shape
    m = cfg.m
    covariances = np.zeros((h, w, m, m), dtype=np.complex128)
    cols = np.flatnonzero(endo_mask.any(axis=0))
    if len(cols) == 0:
        return ClutterModel(covariances, endo_mask)

    power = noise.mean_power * 10.0 ** (cfg.clutter_cnr_db / 10.0)
    power = power * (range_bins[0] / range_bins) ** cfg.clutter_range_decay
    lag = np.arange(m)[:, None] - np.arange(m)[None, :]
    band_center = cols.mean()
    half_width = max(len(cols) / 2.0, 1.0)
    for j in cols:
        psi = cfg.clutter_phase_slope * math.pi * (j - band_center) / half_width
        base = cfg.clutter_correlation ** np.abs(lag) * np.exp(1j * psi * lag)
        covariances[:, j] = power[:, None, None] * base[None]
    covariances[~endo_mask] = 0.0
    return ClutterModel(covariances, endo_mask)


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Batched square-root factor F with F F^H = cov for PSD inputs."""
    eigvals, eigvecs = np.linalg.eigh(cov)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))[..., None, :]


def inject_target(
    values: np.ndarray,
    range_bins: np.ndarray,
    doppler_bins: np.ndarray,
    metadata: RadarMetadata,
    target: TargetReturn,
    rng: np.random.Generator
) -> Optional[Tuple[int, int, float]]:
    """Add one target's return in place, bilinearly bled over its 2x2 bin neighborhood.

    Returns the nearest-bin label pixel and the injected energy, or None when the target is off-grid.
    """
    h, w, m = values.shape
    row = (target.range - range_bins[0]) / (range_bins[1] - range_bins[0])
    col = (target.range_rate - doppler_bins[0]) / (doppler_bins[1] - doppler_bins[0])
    if not (0.0 <= row <= h - 1 and 0.0 <= col <= w - 1):
        return None

    gain = beam_gain(target.azimuth, metadata.aim_azimuth, metadata.beamwidth)
    amplitude = math.sqrt(target.snr * metadata.snr_ref * gain)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    a = amplitude * np.exp(1j * phase) * steering_vector(m, target.azimuth, metadata.broadside_azimuth)

    i0 = min(int(math.floor(row)), h - 2)
    j0 = min(int(math.floor(col)), w - 2)
    fr, fc = row - i0, col - j0
    weights = np.array([[(1 - fr) * (1 - fc), (1 - fr) * fc], [fr * (1 - fc), fr * fc]])
    values[i0:i0 + 2, j0:j0 + 2, :] += np.sqrt(weights)[:, :, None] * a[None, None, :]

    label_row = min(int(math.floor(row + 0.5)), h - 1)
    label_col = min(int(math.floor(col + 0.5)), w - 1)
    return label_row, label_col, m * amplitude ** 2


def synthesize_rdm(
    targets: List[TargetReturn],
    noise: NoiseModel,
    clutter: ClutterModel,
    metadata: RadarMetadata,
    range_bins: np.ndarray,
    doppler_bins: np.ndarray,
    rng: np.random.Generator
) -> Tuple[RdmImage, LabelSet, SynthesisReport]:
    """x = x_tgt + x_clutter + x_noise; each component draws from its own spawned stream."""
    h, w = len(range_bins), len(doppler_bins)
    m = noise.m
    if clutter.covariances.shape[:3] != (h, w, m):
        raise ValueError(f"Clutter model {clutter.covariances.shape} does not cover image {h}x{w}x{m}")
    target_rng, clutter_rng, noise_rng = rng.spawn(3)

    values = np.zeros((h, w, m), dtype=np.complex128)
    report = SynthesisReport()
    labels = LabelSet(mask=np.zeros((h, w), dtype=np.uint8))
    for target in targets:
        if beam_gain(target.azimuth, metadata.aim_azimuth, metadata.beamwidth) <= 0.0:
            report.drop(target, "outside beam")
            continue
        placed = inject_target(values, range_bins, doppler_bins, metadata, target, target_rng)
        if placed is None:
            report.drop(target, "outside bin grid")
            continue
        row, col, energy = placed
        report.injected_energy += energy
        labels.mask[row, col] = 1
        labels.targets.append(LabeledTarget(
            range=target.range, range_rate=target.range_rate, snr=target.snr,
            row=row, col=col, target_id=target.target_id
        ))

    endo = clutter.endo_mask
    if endo.any():
        draws = _complex_normal(clutter_rng, (int(endo.sum()), m))
        factors = _psd_factor(clutter.covariances[endo])
        values[endo] += np.einsum("nab,nb->na", factors, draws)

    values += _complex_normal(noise_rng, (h, w, m)) * np.sqrt(noise.variances)[None, None, :]

    if report.dropped:
        logger.info(f"Dropped {len(report.dropped)} target(s) during synthesis: {sorted(set(report.reasons))}")
    image = RdmImage(
        values=values.astype(np.complex64),
        range_bins=range_bins,
        doppler_bins=doppler_bins,
        endo_mask=endo.copy(),
        metadata=metadata,
    )
    return image, labels, report


def estimate_noise_cov(image: RdmImage) -> NoiseModel:
    """Per-channel median exo-pixel power converted to a mean (Exponential: mean = median / ln 2)."""
    exo = ~image.endo_mask
    if not exo.any():
        raise EstimationError("Cannot estimate noise: the image has no exo-clutter pixels")
    power = np.abs(image.values[exo].astype(np.complex128)) ** 2
    variances = np.median(power, axis=0) / math.log(2.0)
    if np.any(variances <= 0.0):
        logger.warning(f"Degenerate noise estimate {variances} from {exo.sum()} exo pixels")
        return NoiseModel(variances, degenerate=True)
    return NoiseModel(variances)


def estimate_clutter_cov(
    image: RdmImage,
    window_half_width: int,
    noise: Optional[NoiseModel] = None
) -> ClutterModel:
    """Moving-window sample covariance along range for each endo pixel, minus noise, floored to PSD."""
    h, w, m = image.values.shape
    if 2 * window_half_width + 1 < m + 1:
        raise EstimationError(
            f"Window of {2 * window_half_width + 1} range pixels is too small for {m} channels"
        )
    if noise is None:
        noise = estimate_noise_cov(image)

    covariances = np.zeros((h, w, m, m), dtype=np.complex128)
    cols = np.flatnonzero(image.endo_mask.any(axis=0))
    rows = np.arange(h)
    lo = np.clip(rows - window_half_width, 0, h)
    hi = np.clip(rows + window_half_width + 1, 0, h)
    counts = (hi - lo).astype(np.float64)
    noise_cov = np.diag(noise.variances).astype(np.complex128)

    for j in cols:
        x = image.values[:, j, :].astype(np.complex128)
        outer = x[:, :, None] * x[:, None, :].conj()
        csum = np.concatenate([np.zeros((1, m, m), dtype=np.complex128), np.cumsum(outer, axis=0)])
        sample = (csum[hi] - csum[lo]) / counts[:, None, None]
        est = sample - noise_cov
        est = 0.5 * (est + est.conj().transpose(0, 2, 1))
        eigvals, eigvecs = np.linalg.eigh(est)
        eigvals = np.clip(eigvals, 0.0, None)
        covariances[:, j] = (eigvecs * eigvals[:, None, :]) @ eigvecs.conj().transpose(0, 2, 1)

    covariances[~image.endo_mask] = 0.0
    return ClutterModel(covariances, image.endo_mask.copy())


class SensorSimulator:
    """Binds a sensor configuration to its grids and parametric ground-truth models."""

    def __init__(self, cfg: SensorConfig, beamwidth: float):
        self.cfg = cfg
        self.beamwidth = beamwidth
        self.range_bins = range_grid(cfg)
        self.doppler_bins = doppler_grid(cfg)
        self.noise = parametric_noise(cfg)

    @property
    def area(self) -> float:
        """Measurement-space area covered by the grid (m * m/s)."""
        dr = self.range_bins[1] - self.range_bins[0]
        dv = self.doppler_bins[1] - self.doppler_bins[0]
        return float(self.cfg.h * dr * self.cfg.w * dv)

    def metadata(
        self,
        platform: EnuState,
        aim_azimuth: float,
        broadside: Optional[float] = None,
        time: float = 0.0
    ) -> RadarMetadata:
        if broadside is None:
            broadside = aim_azimuth + math.radians(self.cfg.broadside_offset_deg)
        return RadarMetadata(
            aim_azimuth=aim_azimuth,
            platform=platform,
            snr_ref=self.noise.mean_power,
            wavelength=self.cfg.wavelength,
            bandwidth=self.cfg.bandwidth,
            n_pulse=self.cfg.n_pulse,
            t_pri=self.cfg.t_pri,
            l_az=self.cfg.l_az,
            l_el=self.cfg.l_el,
            beamwidth=self.beamwidth,
            broadside_azimuth=broadside,
            endo_width_bins=self.cfg.endo_width_bins,
            time=time,
        )

    def ground_truth_models(self, metadata: RadarMetadata) -> Tuple[NoiseModel, ClutterModel]:
        mask = endo_region(metadata, self.doppler_bins, self.cfg.h)
        return self.noise, parametric_clutter(self.cfg, mask, self.range_bins, self.noise)

    def synthesize(
        self,
        targets: List[TargetReturn],
        metadata: RadarMetadata,
        rng: np.random.Generator
    ) -> Tuple[RdmImage, LabelSet, SynthesisReport]:
        noise, clutter = self.ground_truth_models(metadata)
        return synthesize_rdm(targets, noise, clutter, metadata, self.range_bins, self.doppler_bins, rng)

    def training_image(
        self,
        dataset: DatasetConfig,
        rng: np.random.Generator
    ) -> Tuple[RdmImage, LabelSet, SynthesisReport]:
        """Random platform heading and aim; targets on distinct pixels, a fraction inside the endo band."""
        heading = rng.uniform(-math.pi, math.pi)
        platform = EnuState(
            0.0, 0.0, dataset.platform_altitude,
            dataset.platform_speed * math.sin(heading), dataset.platform_speed * math.cos(heading), 0.0
        )
        aim = float(rng.uniform(-math.pi, math.pi))
        meta = replace(self.metadata(platform, aim), beamwidth=math.radians(dataset.beamwidth_deg))
        mask = endo_region(meta, self.doppler_bins, self.cfg.h)

        h, w = self.cfg.h, self.cfg.w
        endo_pixels = np.flatnonzero(mask.ravel())
        exo_pixels = np.flatnonzero(~mask.ravel())
        k = dataset.targets_per_image
        k_endo = min(int(round(k * dataset.endo_fraction)), len(endo_pixels))
        k_exo = min(k - k_endo, len(exo_pixels))
        chosen = np.concatenate([
            rng.choice(endo_pixels, size=k_endo, replace=False),
            rng.choice(exo_pixels, size=k_exo, replace=False),
        ]).astype(np.int64)

        dr = self.range_bins[1] - self.range_bins[0]
        dv = self.doppler_bins[1] - self.doppler_bins[0]
        offsets = rng.uniform(-0.5, 0.5, size=(len(chosen), 2))
        snr_db = rng.uniform(dataset.snr_db_min, dataset.snr_db_max, size=len(chosen))
        azimuths = aim + rng.uniform(-0.25, 0.25, size=len(chosen)) * meta.beamwidth

        targets = []
        for n, pixel in enumerate(chosen):
            i, j = divmod(int(pixel), w)
            row = float(np.clip(i + offsets[n, 0], 0.0, h - 1))
            col = float(np.clip(j + offsets[n, 1], 0.0, w - 1))
            targets.append(TargetReturn(
                range=float(self.range_bins[0] + row * dr),
                range_rate=float(self.doppler_bins[0] + col * dv),
                snr=float(10.0 ** (snr_db[n] / 10.0)),
                azimuth=float(azimuths[n]),
                target_id=n,
            ))
        clutter = parametric_clutter(self.cfg, mask, self.range_bins, self.noise)
        return synthesize_rdm(targets, self.noise, clutter, meta, self.range_bins, self.doppler_bins, rng)
