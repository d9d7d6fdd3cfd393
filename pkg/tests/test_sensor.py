import math

import numpy as np
import pytest

from src.config.schemas import DatasetConfig, SensorConfig
from src.core.models.radar import ClutterModel, NoiseModel, RdmImage, TargetReturn
from src.core.models.state import EnuState
from src.core.services.geometry import ground_clutter_range_rate
from src.core.services.sensor import (
    SensorSimulator,
    endo_region,
    estimate_clutter_cov,
    estimate_noise_cov,
    inject_target,
    parametric_clutter,
    synthesize_rdm,
)
from src.utils.errors import EstimationError

BEAMWIDTH = math.radians(10.0)
STILL = EnuState(0.0, 0.0, 3000.0)


def _simulator(cfg: SensorConfig) -> SensorSimulator:
    return SensorSimulator(cfg, BEAMWIDTH)


def _zero_noise(m: int) -> NoiseModel:
    return NoiseModel(np.zeros(m), degenerate=True)


def _image(values: np.ndarray, endo_mask: np.ndarray, sim: SensorSimulator) -> RdmImage:
    h, w, _ = values.shape
    return RdmImage(
        values=values,
        range_bins=sim.range_bins[:h] if len(sim.range_bins) >= h else np.arange(h, dtype=float),
        doppler_bins=sim.doppler_bins[:w] if len(sim.doppler_bins) >= w else np.arange(w, dtype=float),
        endo_mask=endo_mask,
        metadata=sim.metadata(STILL, 0.0),
    )


def _target_at(sim: SensorSimulator, row: float, col: float, snr: float = 100.0) -> TargetReturn:
    dr = sim.range_bins[1] - sim.range_bins[0]
    dv = sim.doppler_bins[1] - sim.doppler_bins[0]
    return TargetReturn(
        range=float(sim.range_bins[0] + row * dr),
        range_rate=float(sim.doppler_bins[0] + col * dv),
        snr=snr,
        azimuth=0.0,
    )


def test_grids_follow_resolution(small_sensor):
    sim = _simulator(small_sensor)
    assert sim.range_bins[0] == small_sensor.range_start
    assert sim.range_bins[1] - sim.range_bins[0] == pytest.approx(299_792_458.0 / (2 * small_sensor.bandwidth))
    assert sim.doppler_bins[small_sensor.w // 2] == 0.0


def test_all_zero_components_give_zero_image(small_sensor):
    sim = _simulator(small_sensor)
    meta = sim.metadata(STILL, 0.0)
    clutter = ClutterModel.zeros(small_sensor.h, small_sensor.w, small_sensor.m)
    image, labels, report = synthesize_rdm(
        [], _zero_noise(small_sensor.m), clutter, meta, sim.range_bins, sim.doppler_bins,
        np.random.default_rng(0)
    )
    assert not np.any(image.values)
    assert labels.count == 0 and not report.dropped


@pytest.mark.slow
def test_noise_only_variance_matches_model():
    cfg = SensorConfig(h=512, w=256, m=2, noise_variances=[1.0, 3.0], endo_width_bins=0)
    sim = _simulator(cfg)
    image, _, _ = sim.synthesize([], sim.metadata(STILL, 0.0), np.random.default_rng(1))
    variance = np.mean(np.abs(image.values.astype(np.complex128)) ** 2, axis=(0, 1))
    np.testing.assert_allclose(variance, [1.0, 3.0], rtol=0.05)


def test_single_target_energy_is_additive(small_sensor):
    sim = _simulator(small_sensor)
    meta = sim.metadata(STILL, 0.0)
    clutter = ClutterModel.zeros(small_sensor.h, small_sensor.w, small_sensor.m)
    image, labels, report = synthesize_rdm(
        [_target_at(sim, 10.3, 12.7)], _zero_noise(small_sensor.m), clutter, meta,
        sim.range_bins, sim.doppler_bins, np.random.default_rng(2)
    )
    energy = np.sum(np.abs(image.values.astype(np.complex128)) ** 2)
    assert energy == pytest.approx(report.injected_energy, rel=1e-5)
    assert labels.count == 1
    assert (labels.targets[0].row, labels.targets[0].col) == (10, 13)


def _inject(sim, row, col, cfg):
    values = np.zeros((cfg.h, cfg.w, cfg.m), dtype=np.complex128)
    inject_target(values, sim.range_bins, sim.doppler_bins, sim.metadata(STILL, 0.0),
                  _target_at(sim, row, col), np.random.default_rng(3))
    return np.abs(values[:, :, 0]) ** 2


def test_bin_center_target_fills_one_pixel(small_sensor):
    sim = _simulator(small_sensor)
    power = _inject(sim, 5.0, 9.0, small_sensor)
    assert np.count_nonzero(power) == 1
    assert power[5, 9] == pytest.approx(100.0)


def test_midpoint_target_splits_energy_evenly(small_sensor):
    sim = _simulator(small_sensor)
    power = _inject(sim, 5.5, 9.0, small_sensor)
    assert power[5, 9] == pytest.approx(power[6, 9])
    assert power[5, 9] == pytest.approx(50.0)


def test_patch_energy_independent_of_offset(small_sensor, rng):
    sim = _simulator(small_sensor)
    for _ in range(100):
        row, col = rng.uniform(0, small_sensor.h - 1), rng.uniform(0, small_sensor.w - 1)
        power = _inject(sim, row, col, small_sensor)
        assert power.sum() == pytest.approx(100.0, rel=1e-9)


def test_off_grid_targets_are_reported_not_raised(small_sensor):
    sim = _simulator(small_sensor)
    meta = sim.metadata(STILL, 0.0)
    off_grid = _target_at(sim, -3.0, 4.0)
    outside_beam = TargetReturn(range=float(sim.range_bins[4]), range_rate=0.0, snr=10.0, azimuth=1.0)
    inside = _target_at(sim, 4.0, 4.0)
    _, labels, report = sim.synthesize([off_grid, outside_beam, inside], meta, np.random.default_rng(4))
    assert labels.count == 1 and int(labels.mask.sum()) == 1
    assert report.dropped == [off_grid, outside_beam]
    assert report.reasons == ["outside bin grid", "outside beam"]


def test_components_sum_to_full_image(small_sensor):
    sim = _simulator(small_sensor)
    meta = sim.metadata(STILL, 0.0)
    noise, clutter = sim.ground_truth_models(meta)
    zero_clutter = ClutterModel.zeros(small_sensor.h, small_sensor.w, small_sensor.m, clutter.endo_mask)
    targets = [_target_at(sim, 3.2, 5.6), _target_at(sim, 20.0, 17.5)]

    def run(tgts, nz, cl):
        image, _, _ = synthesize_rdm(tgts, nz, cl, meta, sim.range_bins, sim.doppler_bins,
                                     np.random.default_rng(99))
        return image.values.astype(np.complex128)

    full = run(targets, noise, clutter)
    parts = run(targets, _zero_noise(2), zero_clutter) + run([], _zero_noise(2), clutter) \
        + run([], noise, zero_clutter)
    np.testing.assert_allclose(parts, full, rtol=1e-5, atol=1e-4)


@pytest.mark.slow
def test_noise_estimate_recovers_variance(rng):
    n = 100_000
    values = (rng.standard_normal((n, 1, 1)) + 1j * rng.standard_normal((n, 1, 1))) * math.sqrt(2.0 / 2.0)
    sim = _simulator(SensorConfig(h=8, w=8, m=1, noise_variances=[1.0]))
    estimate = estimate_noise_cov(_image(values, np.zeros((n, 1), dtype=bool), sim))
    assert 1.9 <= estimate.variances[0] <= 2.1


@pytest.mark.slow
def test_median_to_mean_conversion_on_exponential_power(rng):
    n = 100_000
    power = rng.exponential(1.0, n)
    values = (np.sqrt(power) * np.exp(1j * rng.uniform(0, 2 * np.pi, n))).reshape(n, 1, 1)
    sim = _simulator(SensorConfig(h=8, w=8, m=1, noise_variances=[1.0]))
    estimate = estimate_noise_cov(_image(values, np.zeros((n, 1), dtype=bool), sim))
    assert estimate.variances[0] == pytest.approx(1.0, rel=0.03)


def test_all_zero_exo_is_degenerate(small_sensor):
    sim = _simulator(small_sensor)
    values = np.zeros((small_sensor.h, small_sensor.w, small_sensor.m), dtype=np.complex64)
    estimate = estimate_noise_cov(_image(values, np.zeros((small_sensor.h, small_sensor.w), bool), sim))
    assert estimate.degenerate
    np.testing.assert_array_equal(estimate.variances, 0.0)


def test_empty_exo_region_raises(small_sensor):
    sim = _simulator(small_sensor)
    values = np.ones((small_sensor.h, small_sensor.w, small_sensor.m), dtype=np.complex64)
    with pytest.raises(EstimationError):
        estimate_noise_cov(_image(values, np.ones((small_sensor.h, small_sensor.w), bool), sim))


@pytest.mark.slow
def test_clutter_estimate_recovers_constant_column_covariance(rng):
    h, m, half = 2048, 2, 100
    truth = np.array([[100.0, 90.0 * np.exp(0.4j)], [90.0 * np.exp(-0.4j), 100.0]])
    factor = np.linalg.cholesky(truth)
    draws = (rng.standard_normal((h, m)) + 1j * rng.standard_normal((h, m))) / math.sqrt(2)
    noise = (rng.standard_normal((h, 4, m)) + 1j * rng.standard_normal((h, 4, m))) / math.sqrt(2)
    values = noise.copy()
    values[:, 1, :] += draws @ factor.T
    endo = np.zeros((h, 4), dtype=bool)
    endo[:, 1] = True
    sim = _simulator(SensorConfig(h=8, w=8, m=2))
    model = estimate_clutter_cov(_image(values, endo, sim), half, NoiseModel(np.ones(m)))
    errors = [np.linalg.norm(model.covariances[i, 1] - truth) / np.linalg.norm(truth) for i in range(h)]
    assert np.median(errors) < 0.10
    assert not np.any(model.covariances[:, 0])


def test_clutter_estimates_are_hermitian_psd(small_sensor):
    sim = _simulator(small_sensor)
    image, _, _ = sim.synthesize([], sim.metadata(STILL, 0.0), np.random.default_rng(5))
    model = estimate_clutter_cov(image, small_sensor.clutter_window_half_width)
    cov = model.covariances[image.endo_mask]
    np.testing.assert_allclose(cov, cov.conj().transpose(0, 2, 1), atol=1e-9)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-9)
    assert not np.any(model.covariances[~image.endo_mask])


def test_scalar_clutter_matches_windowed_variance(rng):
    h, half = 40, 5
    values = (rng.standard_normal((h, 3, 1)) + 1j * rng.standard_normal((h, 3, 1))) * 3.0
    endo = np.zeros((h, 3), dtype=bool)
    endo[:, 2] = True
    sim = _simulator(SensorConfig(h=8, w=8, m=1, noise_variances=[1.0]))
    model = estimate_clutter_cov(_image(values, endo, sim), half, NoiseModel([1.5]))
    power = np.abs(values[:, 2, 0]) ** 2
    for i in range(h):
        window = power[max(0, i - half):min(h, i + half + 1)]
        expected = max(window.mean() - 1.5, 0.0)
        assert model.covariances[i, 2, 0, 0].real == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_small_window_is_rejected(small_sensor):
    sim = _simulator(small_sensor)
    image, _, _ = sim.synthesize([], sim.metadata(STILL, 0.0), np.random.default_rng(6))
    with pytest.raises(EstimationError):
        estimate_clutter_cov(image, 0)


def test_endo_band_centered_at_zero_for_still_platform(small_sensor):
    sim = _simulator(small_sensor)
    mask = endo_region(sim.metadata(STILL, 0.3), sim.doppler_bins, small_sensor.h)
    cols = np.flatnonzero(mask[0])
    assert len(cols) == small_sensor.endo_width_bins
    assert small_sensor.w // 2 in cols
    assert np.all(mask == mask[0])


def test_zero_width_band_is_empty():
    cfg = SensorConfig(h=16, w=16, m=2, endo_width_bins=0)
    sim = _simulator(cfg)
    assert not endo_region(sim.metadata(STILL, 0.0), sim.doppler_bins, cfg.h).any()


def test_moving_platform_band_center(small_sensor):
    sim = _simulator(small_sensor)
    platform = EnuState(0.0, 0.0, 3000.0, 3.0, 4.0, 0.0)
    aim = 0.6
    mask = endo_region(sim.metadata(platform, aim), sim.doppler_bins, small_sensor.h)
    expected_rr = -(3.0 * math.sin(aim) + 4.0 * math.cos(aim))
    assert ground_clutter_range_rate(platform, aim) == pytest.approx(expected_rr)
    center = int(np.argmin(np.abs(sim.doppler_bins - expected_rr)))
    cols = np.flatnonzero(mask[0])
    assert center in cols
    assert cols[0] == max(center - small_sensor.endo_width_bins // 2, 0)


def test_parametric_clutter_is_zero_outside_band(small_sensor):
    sim = _simulator(small_sensor)
    meta = sim.metadata(STILL, 0.0)
    mask = endo_region(meta, sim.doppler_bins, small_sensor.h)
    model = parametric_clutter(small_sensor, mask, sim.range_bins, sim.noise)
    assert not np.any(model.covariances[~mask])
    cov = model.covariances[mask]
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-9)


def test_training_image_places_distinct_labeled_targets():
    cfg = SensorConfig(h=32, w=32, m=2, endo_width_bins=8)
    sim = _simulator(cfg)
    dataset = DatasetConfig(num_images=1, targets_per_image=20, endo_fraction=0.5)
    image, labels, report = sim.training_image(dataset, np.random.default_rng(8))
    assert labels.count == 20 and int(labels.mask.sum()) == 20
    assert not report.dropped
    endo_hits = sum(image.endo_mask[t.row, t.col] for t in labels.targets)
    assert endo_hits == 10
