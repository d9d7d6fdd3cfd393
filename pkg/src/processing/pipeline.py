"""Command implementations: data generation through tracking scores."""
import json
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from src.config.schemas import RunConfig, config_hash
from src.core.models.detection import Detection
from src.core.models.radar import RdmImage, TargetReturn
from src.core.models.state import Scenario
from src.core.services.classical_detector import CfarDetector, calibrated_snr, cfar_peaks, false_alarm_rate
from src.core.services.cvae_uncertainty import (
    CvaeUncertainty,
    ResidualCvae,
    collect_dataset_residuals,
    train_cvae,
)
from src.core.services.geometry import measure
from src.core.services.metrics import (
    TrackingScores,
    auc,
    default_thresholds,
    match_operating_point,
    precision_recall_vs_threshold,
    roc_pr,
    tpr_at_fpr,
    tracking_scores,
)
from src.core.services.mht import MultiHypothesisTracker, ScanContext, TrackReport
from src.core.services.scenario import broadside_azimuth, generate_scenario
from src.core.services.sensor import SensorSimulator, estimate_clutter_cov, estimate_noise_cov
from src.core.services.tracker import BaselineCovarianceParams, baseline_R, false_alarm_density
from src.core.services.unet_detector import UNet, UNetDetector, class_weights, prepare_input, train_detector
from src.nn import Adam, load_checkpoint, save_checkpoint
from src.processing.dataset_io import DatasetReader, DatasetWriter
from src.processing.exports import (
    curves_frame,
    detections_frame,
    loss_frame,
    read_csv,
    scores_frame,
    track_points_from_frame,
    trajectories_frame,
    trajectories_from_frame,
    tracks_frame,
    write_csv,
)
from src.processing.manifest import ArtifactManifest
from src.utils.errors import ConfigError, EstimationError
from src.utils.logging import logger
from src.utils.rng import derive_rng

OPERATING_POINT = "operating_point.json"
TRUTH_CSV = "truth.csv"
TRACKS_CSV = "tracks.csv"
DETECTIONS_CSV = "detections.csv"
SCORES_CSV = "scores.csv"

console = Console()


def pixel_snr(image: RdmImage, row: int, col: int, floor: float) -> float:
    """Per-channel power over the noise reference, minus the noise floor itself."""
    power = float(np.mean(np.abs(image.values[row, col]) ** 2))
    return max(power / image.metadata.snr_ref - 1.0, floor)


class Pipeline:
    """One run directory: its config, seed, manifest and the commands that fill it."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.seed = cfg.require_seed()
        self.out_dir = Path(cfg.output_dir)
        self.config_hash = config_hash(cfg)
        self.manifest = ArtifactManifest(self.out_dir)

    def artifact(self, name: str) -> Path:
        return self.out_dir / name

    def _record(self, path: Path, command: str):
        self.manifest.record(path, self.config_hash, self.seed, command)

    # gen-data / estimate-sensor

    def _dataset_sensor(self) -> SensorSimulator:
        return SensorSimulator(self.cfg.sensor, math.radians(self.cfg.dataset.beamwidth_deg))

    def gen_data(self) -> Dict[str, List[int]]:
        """Write the training and test RDMD files; returns per-image label counts per file."""
        sensor = self._dataset_sensor()
        counts: Dict[str, List[int]] = {}
        for name, ds_cfg, stream in (
            (self.cfg.artifacts.dataset, self.cfg.dataset, "gen"),
            (self.cfg.artifacts.test_dataset, self.cfg.test_dataset, "gen-test"),
        ):
            path = self.artifact(name)
            counts[name] = []
            with DatasetWriter(path, ds_cfg.num_images) as writer:
                for i in tqdm(range(ds_cfg.num_images), desc=f"generating {name}", leave=False):
                    image, labels, _ = sensor.training_image(ds_cfg, derive_rng(self.seed, f"{stream}/img/{i}"))
                    writer.append(image, labels)
                    counts[name].append(labels.count)
                    logger.info(f"{name} image {i}: {labels.count} targets")
            self._record(path, "gen-data")
            logger.info(f"{name}: {len(counts[name])} images, {sum(counts[name])} labels")
        return counts

    def estimate_sensor(self) -> pd.DataFrame:
        """Compare noise and clutter estimates on the training images with their generating models."""
        sensor = self._dataset_sensor()
        reader = DatasetReader(self.artifact(self.cfg.artifacts.dataset))
        rows = []
        for i, (image, _) in enumerate(tqdm(reader, desc="estimating sensor", leave=False)):
            noise = estimate_noise_cov(image)
            true_noise, true_clutter = sensor.ground_truth_models(image.metadata)
            row = {"image": i, "endo_pixels": int(image.endo_mask.sum()), "noise_degenerate": noise.degenerate}
            for c in range(image.m):
                row[f"noise_var_{c}"] = float(noise.variances[c])
                row[f"noise_true_{c}"] = float(true_noise.variances[c])
            row["noise_rel_error"] = float(
                np.linalg.norm(noise.variances - true_noise.variances) / np.linalg.norm(true_noise.variances))
            row["clutter_rel_error"] = math.nan
            if image.endo_mask.any() and not noise.degenerate:
                clutter = estimate_clutter_cov(image, self.cfg.sensor.clutter_window_half_width, noise)
                endo = image.endo_mask
                diff = clutter.covariances[endo] - true_clutter.covariances[endo]
                row["clutter_rel_error"] = float(np.linalg.norm(diff) / np.linalg.norm(true_clutter.covariances[endo]))
            rows.append(row)
        frame = pd.DataFrame(rows)
        path = write_csv(frame, self.artifact("sensor_estimates.csv"))
        self._record(path, "estimate-sensor")
        logger.info(
            f"Sensor estimates over {len(frame)} images: mean noise error {frame['noise_rel_error'].mean():.4f}, "
            f"mean clutter error {frame['clutter_rel_error'].mean():.4f}"
        )
        return frame

    # train-unet / train-cvae

    def _new_unet(self) -> UNet:
        return UNet(self.cfg.unet, 2 * self.cfg.sensor.m, derive_rng(self.seed, "unet/init"),
                    dropout_rng=derive_rng(self.seed, "unet/dropout"))

    def load_unet(self) -> UNet:
        model = self._new_unet()
        load_checkpoint(self.artifact(self.cfg.artifacts.unet_checkpoint)).restore(model)
        return model.eval()

    def train_unet(self, resume: bool = False) -> List[float]:
        cfg = self.cfg
        reader = DatasetReader(self.artifact(cfg.artifacts.dataset))
        first, _ = reader[0]
        k_avg = reader.label_count() / len(reader)
        weights = class_weights(first.h, first.w, k_avg)
        model = self._new_unet()
        optimizer = Adam(model.parameters(), lr=cfg.training.learning_rate,
                         betas=(cfg.training.beta1, cfg.training.beta2), eps=cfg.training.eps)
        ckpt_path = self.artifact(cfg.artifacts.unet_checkpoint)
        curve: List[float] = []
        start_epoch = 0
        if resume:
            ckpt = load_checkpoint(ckpt_path)
            ckpt.restore(model, optimizer, {"dropout": model.dropout_rng})
            start_epoch = int(ckpt.meta["epochs_done"])
            curve = list(ckpt.meta["curve"])
            logger.info(f"Resuming UNet training at epoch {start_epoch + 1}, optimizer step {optimizer.step_count}")
        remaining = cfg.training.epochs - start_epoch
        if remaining <= 0:
            logger.info(f"UNet already trained for {start_epoch} epochs; nothing to do")
            return curve
        logger.info(
            f"Training UNet ({model.num_parameters()} parameters) on {len(reader)} images, "
            f"class weights w0={weights[0]:.4f} w1={weights[1]:.2f}"
        )

        def sample(i: int) -> Tuple[np.ndarray, np.ndarray]:
            image, labels = reader[i]
            return prepare_input(image), labels.mask.astype(np.float32)

        def checkpoint(epoch: int, loss: float, opt: Adam):
            curve.append(loss)
            meta = {"epochs_done": epoch + 1, "curve": curve, "config_hash": self.config_hash, "seed": self.seed}
            save_checkpoint(ckpt_path, "unet", model, meta=meta, optimizer=opt, rngs={"dropout": model.dropout_rng})

        train_detector(model, sample, len(reader), cfg.training, weights, self.seed, epochs=remaining,
                       optimizer=optimizer, start_epoch=start_epoch, on_epoch=checkpoint)
        loss_path = write_csv(loss_frame(curve), self.artifact("unet_loss.csv"))
        self._record(ckpt_path, "train-unet")
        self._record(loss_path, "train-unet")
        return curve

    def train_cvae(self) -> List[float]:
        cfg = self.cfg
        detector = UNetDetector(self.load_unet(), cfg.unet.threshold, cfg.unet.patch_radius)
        reader = DatasetReader(self.artifact(cfg.artifacts.dataset))
        residuals = collect_dataset_residuals(detector.detect, reader, cfg.cvae.match_threshold)
        if not residuals:
            raise EstimationError(
                f"No detection matched a label at threshold {cfg.cvae.match_threshold}; cannot train the CVAE")
        model = ResidualCvae(cfg.unet.feature_width, cfg.cvae, derive_rng(self.seed, "cvae/init"))
        curve = train_cvae(model, residuals, cfg.cvae, self.seed)
        ckpt_path = self.artifact(cfg.artifacts.cvae_checkpoint)
        size = save_checkpoint(ckpt_path, "cvae", model,
                               meta={"residuals": len(residuals), "config_hash": self.config_hash, "seed": self.seed})
        logger.info(f"CVAE: {model.num_parameters()} parameters, checkpoint {size} bytes")
        loss_path = write_csv(loss_frame(curve), self.artifact("cvae_loss.csv"))
        self._record(ckpt_path, "train-cvae")
        self._record(loss_path, "train-cvae")
        return curve

    def load_cvae(self) -> ResidualCvae:
        model = ResidualCvae(self.cfg.unet.feature_width, self.cfg.cvae, derive_rng(self.seed, "cvae/init"))
        load_checkpoint(self.artifact(self.cfg.artifacts.cvae_checkpoint)).restore(model)
        return model.eval()

    # eval-detect

    def _cfar(self) -> CfarDetector:
        return CfarDetector(self.cfg.tracker.cfar_threshold, self.cfg.sensor.clutter_window_half_width,
                            self.cfg.sensor.stap_loading)

    def _cfar_models(self, sensor: SensorSimulator, detector: CfarDetector, image: RdmImage):
        if self.cfg.sensor.stap_oracle:
            noise, clutter = sensor.ground_truth_models(image.metadata)
            return clutter, noise
        return detector.models(image)

    def eval_detect(self) -> Dict[str, float]:
        cfg = self.cfg
        reader = DatasetReader(self.artifact(cfg.artifacts.test_dataset))
        sensor = self._dataset_sensor()
        cfar = self._cfar()
        labels = [lab.mask.astype(bool) for _, lab in reader]

        started = time.perf_counter()
        cfar_scores = [cfar.score_map(img, self._cfar_models(sensor, cfar, img)) for img, _ in
                       tqdm(reader, desc="cfar", leave=False)]
        logger.info(f"CFAR: {(time.perf_counter() - started) / len(reader):.3f}s per image")
        thresholds = np.unique(np.concatenate([default_thresholds(cfar_scores, cfg.metrics.num_thresholds),
                                               [cfg.tracker.cfar_threshold]]))
        cfar_points = roc_pr(cfar_scores, labels, thresholds, cfg.metrics.bleed_tolerance)
        curves = [curves_frame(cfar_points, "cfar")]
        pr = [precision_recall_vs_threshold(cfar_points).assign(detector="cfar")]
        summary = {
            "cfar_auc": auc(cfar_points),
            "cfar_tpr_at_target_fpr": tpr_at_fpr(cfar_points, cfg.metrics.target_fpr),
            "target_fpr": cfg.metrics.target_fpr,
        }

        if cfg.detector == "unet":
            detector = UNetDetector(self.load_unet(), cfg.unet.threshold, cfg.unet.patch_radius)
            started = time.perf_counter()
            unet_scores = [detector.detection_map(img).probabilities for img, _ in
                           tqdm(reader, desc="unet", leave=False)]
            logger.info(f"UNet: {(time.perf_counter() - started) / len(reader):.3f}s per image")
            thresholds = np.unique(np.concatenate([default_thresholds(unet_scores, cfg.metrics.num_thresholds),
                                                   np.linspace(0.0, 1.0, cfg.metrics.num_thresholds)]))
            unet_points = roc_pr(unet_scores, labels, thresholds, cfg.metrics.bleed_tolerance)
            curves.append(curves_frame(unet_points, "unet"))
            pr.append(precision_recall_vs_threshold(unet_points).assign(detector="unet"))
            summary.update({
                "unet_auc": auc(unet_points),
                "unet_tpr_at_target_fpr": tpr_at_fpr(unet_points, cfg.metrics.target_fpr),
            })
            summary.update(match_operating_point(unet_points, cfar_points, cfg.tracker.cfar_threshold))

        outputs = [
            write_csv(pd.concat(curves, ignore_index=True), self.artifact("roc_curves.csv")),
            write_csv(pd.concat(pr, ignore_index=True), self.artifact("pr_vs_threshold.csv")),
        ]
        op_path = self.artifact(OPERATING_POINT)
        op_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(op_path)
        for path in outputs:
            self._record(path, "eval-detect")

        table = Table(title="Detection")
        table.add_column("metric")
        table.add_column("value", justify="right")
        for key, value in sorted(summary.items()):
            table.add_row(key, f"{value:.6g}")
        console.print(table)
        return summary

    # track / eval-track

    def unet_threshold(self) -> float:
        value = self.cfg.tracker.unet_threshold
        if value != "auto":
            return float(value)
        path = self.artifact(OPERATING_POINT)
        if not path.exists():
            raise ConfigError(f"unet_threshold is 'auto' but {path} does not exist; run eval-detect first")
        op = json.loads(path.read_text(encoding="utf-8"))
        if "unet_threshold" not in op:
            raise ConfigError(f"{path} has no UNet operating point")
        return float(op["unet_threshold"])

    def _clutter_density(self, sensor: SensorSimulator) -> float:
        tracker = self.cfg.tracker
        if tracker.false_alarm_density is not None:
            return tracker.false_alarm_density
        rate = false_alarm_rate(tracker.cfar_threshold) if self.cfg.detector == "cfar" \
            else tracker.unet_false_alarm_rate
        return false_alarm_density(rate, self.cfg.sensor.h, self.cfg.sensor.w, sensor.area)

    def _scan_returns(self, scenario: Scenario, k: int, snrs: List[float]) -> List[TargetReturn]:
        platform = scenario.platform.state_at(k)
        returns = []
        for traj, snr in zip(scenario.targets, snrs):
            z = measure(traj.state_at(k), platform)
            returns.append(TargetReturn(range=z.range, range_rate=z.range_rate, snr=snr, azimuth=z.azimuth,
                                        target_id=traj.object_id))
        return returns

    def track(self) -> TrackingScores:
        """Scenario -> per-scan RDM -> detection -> measurement covariance -> MHT -> scores."""
        cfg = self.cfg
        if cfg.detector == "cfar" and cfg.uncertainty == "cvae":
            raise ConfigError("The CVAE covariance needs UNet features; use detector 'unet' or 'baseline-eq9'")
        scenario_cfg = cfg.require_scenario()
        scenario = generate_scenario(scenario_cfg, self.seed)
        sensor = SensorSimulator(cfg.sensor, math.radians(scenario_cfg.beam.beamwidth_deg))
        snrs = [10.0 ** (t.snr_db / 10.0) for t in scenario_cfg.targets]

        cfar: Optional[CfarDetector] = None
        unet: Optional[UNetDetector] = None
        threshold = cfg.tracker.cfar_threshold
        if cfg.detector == "cfar":
            cfar = self._cfar()
        else:
            threshold = self.unet_threshold()
            unet = UNetDetector(self.load_unet(), threshold, cfg.unet.patch_radius)
        cvae = CvaeUncertainty(self.load_cvae(), cfg.cvae.samples, self.seed) if cfg.uncertainty == "cvae" else None

        tracker = MultiHypothesisTracker(cfg.tracker, self._clutter_density(sensor))
        range_limits = (float(sensor.range_bins[0]), float(sensor.range_bins[-1]))
        rate_limits = (float(sensor.doppler_bins[0]), float(sensor.doppler_bins[-1]))
        all_detections: List[Detection] = []
        reports: List[TrackReport] = []

        for k, t in enumerate(tqdm(scenario.times, desc="tracking", leave=False)):
            platform = scenario.platform.state_at(k)
            aim = float(scenario.aim_azimuths[k])
            meta = sensor.metadata(platform, aim, broadside_azimuth(scenario_cfg, platform,
                                                                     cfg.sensor.broadside_offset_deg), float(t))
            image, _, _ = sensor.synthesize(self._scan_returns(scenario, k, snrs), meta,
                                            derive_rng(self.seed, f"track/scan/{k}/synth"))
            detections = []
            if cfar is not None:
                stat = cfar.score_map(image, self._cfar_models(sensor, cfar, image))
                for hit in cfar_peaks(stat, threshold):
                    snr = calibrated_snr(hit.statistic, image.m, cfg.tracker.snr_floor)
                    R = baseline_R(BaselineCovarianceParams.from_metadata(meta, snr))[:2, :2]
                    detections.append(Detection(
                        time=float(t), range=float(image.range_bins[hit.row]),
                        range_rate=float(image.doppler_bins[hit.col]), score=hit.statistic, R=R,
                        endo=bool(image.endo_mask[hit.row, hit.col]), snr=snr, pixel=(hit.row, hit.col),
                    ))
            else:
                found, _ = unet.detect(image)
                for j, det in enumerate(found):
                    snr = pixel_snr(image, det.pixel[0], det.pixel[1], cfg.tracker.snr_floor)
                    if cvae is not None:
                        R = cvae.covariance(det, f"scan/{k}/det/{j}")
                    else:
                        R = baseline_R(BaselineCovarianceParams.from_metadata(meta, snr))[:2, :2]
                    detections.append(Detection(
                        time=float(t), range=det.range, range_rate=det.range_rate, score=det.score, R=R,
                        endo=det.endo, snr=snr, pixel=det.pixel,
                    ))
            ctx = ScanContext(time=float(t), platform=platform, aim_azimuth=aim, beamwidth=sensor.beamwidth,
                              range_limits=range_limits, range_rate_limits=rate_limits)
            reports.extend(tracker.step(detections, ctx))
            all_detections.extend(detections)

        logger.info(
            f"Tracked {len(scenario.times)} scans with {cfg.detector}/{cfg.uncertainty}: "
            f"{len(all_detections)} detections, {len({r.track_id for r in reports})} confirmed tracks"
        )
        for frame, name in (
            (trajectories_frame(scenario.targets), TRUTH_CSV),
            (detections_frame(all_detections), DETECTIONS_CSV),
            (tracks_frame(reports), TRACKS_CSV),
        ):
            self._record(write_csv(frame, self.artifact(name)), "track")
        return self.eval_track()

    def eval_track(self) -> TrackingScores:
        truths = trajectories_from_frame(read_csv(self.artifact(TRUTH_CSV)))
        points = track_points_from_frame(read_csv(self.artifact(TRACKS_CSV)))
        scores = tracking_scores(points, truths, self.cfg.metrics.association_distance)
        system = f"{self.cfg.detector}+{self.cfg.uncertainty}"
        self._record(write_csv(scores_frame(scores, system), self.artifact(SCORES_CSV)), "eval-track")

        table = Table(title=f"Tracking ({system})")
        for name in ("TaC", "TrC", "TaP", "TrP", "LE (km)", "False tracks"):
            table.add_column(name, justify="right")
        table.add_row(*(str(v) if isinstance(v, int) else f"{v:.4f}" for v in scores.as_row().values()))
        console.print(table)
        return scores

    # verify

    def verify(self) -> List[str]:
        return self.manifest.verify(self.config_hash)
