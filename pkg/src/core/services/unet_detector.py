"""Pixel-wise UNet target detector with sub-pixel peak refinement."""
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from src.config.schemas import TrainingConfig, UNetConfig
from src.core.models.detection import DetectionMap, SubpixelDetection
from src.core.models.radar import RdmImage
from src.nn import Adam, Conv2d, Dropout, MaxPool2, Module, ReLU, Tensor, Upsample2, concat, no_grad
from src.utils.errors import DomainError, NumericalError, ShapeError
from src.utils.logging import logger
from src.utils.rng import derive_rng

PROBABILITY_EPS = 1e-7
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class UNet(Module):
    """Contraction/expansion network with skip connections and a two-class softmax head.

    Every block keeps `feature_width` channels; the last expansion block's activations are the
    per-pixel feature vectors.
    """
    kind = "unet"

    def __init__(self, cfg: UNetConfig, in_channels: int, rng: np.random.Generator,
                 dropout_rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        f, k = cfg.feature_width, cfg.kernel_size
        self.dropout_rng = dropout_rng if dropout_rng is not None else np.random.default_rng(0)
        self.down = []
        channels = in_channels
        for i in range(cfg.depth_blocks):
            self.down.append(Conv2d(channels, f, k, rng, name=f"down{i}.conv0"))
            self.down.append(Conv2d(f, f, k, rng, name=f"down{i}.conv1"))
            channels = f
        self.bottom = [Conv2d(f, f, k, rng, name="bottom.conv0"), Conv2d(f, f, k, rng, name="bottom.conv1")]
        self.up = []
        for i in range(cfg.depth_blocks):
            self.up.append(Conv2d(2 * f, f, k, rng, name=f"up{i}.conv0"))
            self.up.append(Conv2d(f, f, k, rng, name=f"up{i}.conv1"))
        self.head = Conv2d(f, 2, 1, rng, name="head")
        self.relu = ReLU()
        self.pool = MaxPool2()
        self.upsample = Upsample2()
        self.dropout = Dropout(cfg.dropout, self.dropout_rng)

    def check_input(self, shape: Tuple[int, ...]):
        factor = 2 ** self.cfg.depth_blocks
        if len(shape) != 4 or shape[-1] != self.in_channels:
            raise ShapeError(f"unet: expected (N, H, W, {self.in_channels}) input, got {shape}")
        if shape[1] % factor or shape[2] % factor:
            raise ShapeError(f"unet: image {shape[1]}x{shape[2]} is not divisible by 2^{self.cfg.depth_blocks}")

    def _block(self, convs: Sequence[Conv2d], x: Tensor) -> Tensor:
        for conv in convs:
            x = self.relu(conv(x))
        return x

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns (class probabilities (N,H,W,2), features (N,H,W,F))."""
        self.check_input(x.shape)
        skips = []
        for i in range(self.cfg.depth_blocks):
            x = self._block(self.down[2 * i:2 * i + 2], x)
            skips.append(x)
            x = self.dropout(self.pool(x))
        x = self._block(self.bottom, x)
        for i in range(self.cfg.depth_blocks):
            x = concat([self.upsample(x), skips.pop()])
            x = self.dropout(self._block(self.up[2 * i:2 * i + 2], x))
        features = x
        return self.head(features).softmax(), features

    def describe(self):
        return {"kind": self.kind, "depth_blocks": self.cfg.depth_blocks, "feature_width": self.cfg.feature_width}


def prepare_input(image: RdmImage) -> np.ndarray:
    """(H, W, 2m) float32: RMS-standardized, real/imag interleaved per radar channel."""
    values = image.values.astype(np.complex128)
    rms = math.sqrt(float(np.mean(np.abs(values) ** 2)))
    if rms > 0:
        values = values / rms
    stacked = np.stack([values.real, values.imag], axis=-1)
    return stacked.reshape(image.h, image.w, 2 * image.m).astype(np.float32)


def class_weights(h: int, w: int, k_avg: float) -> Tuple[float, float]:
    hw = h * w
    if not 0 < k_avg < hw:
        raise DomainError(f"Average target count {k_avg} must lie in (0, {hw})")
    return hw / (hw - k_avg), hw / k_avg


def weighted_ce_loss(y_hat: Tensor, y: np.ndarray, w0: float, w1: float, eps: float = PROBABILITY_EPS) -> Tensor:
    """-sum[w1 Y log p + w0 (1-Y)(1 - log p)] per image, averaged over the batch."""
    y = np.asarray(y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ShapeError(f"weighted_ce_loss: prediction {y_hat.shape} does not match labels {y.shape}")
    log_p = y_hat.clip(eps, 1.0 - eps).log()
    per_pixel = log_p * (w1 * y) + (1.0 - log_p) * (w0 * (1.0 - y))
    batch = y.shape[0] if y.ndim == 3 else 1
    return -per_pixel.sum() / float(batch)


def subpixel_estimate(
    probabilities: np.ndarray,
    pixel: Tuple[int, int],
    range_bins: np.ndarray,
    doppler_bins: np.ndarray,
    patch_radius: int = 1
) -> Tuple[float, float]:
    """Probability-weighted mean of the bin coordinates over the patch around `pixel`."""
    i, j = pixel
    h, w = probabilities.shape
    r0, r1 = max(i - patch_radius, 0), min(i + patch_radius + 1, h)
    c0, c1 = max(j - patch_radius, 0), min(j + patch_radius + 1, w)
    weights = probabilities[r0:r1, c0:c1].astype(np.float64)
    total = weights.sum()
    if total <= 0:
        return float(range_bins[i]), float(doppler_bins[j])
    rng_est = float(np.sum(weights.sum(axis=1) * range_bins[r0:r1]) / total)
    rr_est = float(np.sum(weights.sum(axis=0) * doppler_bins[c0:c1]) / total)
    return rng_est, rr_est


def extract_detections(
    dmap: DetectionMap,
    threshold: float,
    range_bins: np.ndarray,
    doppler_bins: np.ndarray,
    endo_mask: Optional[np.ndarray] = None,
    patch_radius: int = 1
) -> List[SubpixelDetection]:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"Detection threshold must be in (0, 1], got {threshold}")
    probs = dmap.probabilities
    labelled, count = ndimage.label(probs >= threshold, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    peaks = ndimage.maximum_position(probs, labels=labelled, index=np.arange(1, count + 1))
    detections = []
    for i, j in sorted((int(r), int(c)) for r, c in peaks):
        rng_est, rr_est = subpixel_estimate(probs, (i, j), range_bins, doppler_bins, patch_radius)
        detections.append(SubpixelDetection(
            range=rng_est,
            range_rate=rr_est,
            score=float(probs[i, j]),
            pixel=(i, j),
            features=dmap.features[i, j].copy(),
            endo=bool(endo_mask[i, j]) if endo_mask is not None else False,
        ))
    return detections


class UNetDetector:
    """Frozen-model inference plus the training loop."""

    def __init__(self, model: UNet, threshold: float = 0.5, patch_radius: int = 1):
        self.model = model
        self.threshold = threshold
        self.patch_radius = patch_radius

    def detection_map(self, image: RdmImage) -> DetectionMap:
        self.model.eval()
        with no_grad():
            probs, features = self.model(Tensor(prepare_input(image)[None]))
        return DetectionMap(probabilities=probs.data[0, :, :, 1], features=features.data[0])

    def detect(self, image: RdmImage, threshold: Optional[float] = None) -> Tuple[List[SubpixelDetection], DetectionMap]:
        dmap = self.detection_map(image)
        dets = extract_detections(
            dmap, threshold if threshold is not None else self.threshold,
            image.range_bins, image.doppler_bins, image.endo_mask, self.patch_radius
        )
        return dets, dmap


def unet_forward(model: UNet, image: RdmImage) -> DetectionMap:
    return UNetDetector(model).detection_map(image)


def train_detector(
    model: UNet,
    sample: Callable[[int], Tuple[np.ndarray, np.ndarray]],
    num_samples: int,
    cfg: TrainingConfig,
    weights: Tuple[float, float],
    seed: int,
    epochs: Optional[int] = None,
    optimizer: Optional[Adam] = None,
    start_epoch: int = 0,
    on_epoch: Optional[Callable[[int, float, Adam], None]] = None
) -> List[float]:
    """Adam on the weighted cross entropy; `sample(i)` returns (input HxWxC, label mask HxW).

    Returns the mean training loss of every epoch run.
    """
    if num_samples <= 0:
        raise ValueError("Training needs a non-empty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    w0, w1 = weights
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    model.train()
    curve = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = derive_rng(seed, f"unet/shuffle/epoch/{epoch}").permutation(num_samples)
        batches = [order[i:i + cfg.batch_size] for i in range(0, num_samples, cfg.batch_size)]
        started = time.perf_counter()
        total = 0.0
        for b, idx in enumerate(tqdm(batches, desc=f"unet epoch {epoch + 1}", leave=False)):
            pairs = [sample(int(i)) for i in idx]
            x = Tensor(np.stack([p[0] for p in pairs]))
            y = np.stack([p[1] for p in pairs]).astype(np.float32)
            optimizer.zero_grad()
            probs, _ = model(x)
            loss = weighted_ce_loss(probs[..., 1], y, w0, w1)
            value = loss.item()
            if not np.isfinite(value):
                logger.error(f"Non-finite UNet loss at epoch {epoch + 1}, batch {b}: {value}")
                raise NumericalError(
                    f"UNet training diverged at epoch {epoch + 1} batch {b} (loss={value}, "
                    f"lr={optimizer.lr}, step={optimizer.step_count})"
                )
            loss.backward()
            optimizer.step()
            total += value * len(idx)
        mean_loss = total / num_samples
        curve.append(mean_loss)
        logger.info(
            f"UNet epoch {epoch + 1}: loss={mean_loss:.4f} ({time.perf_counter() - started:.1f}s, "
            f"step {optimizer.step_count})"
        )
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, optimizer)
    model.eval()
    return curve
