"""Conditional VAE over detector residuals, one twin for endo-clutter and one for exo-clutter pixels.

Each twin has an encoder p(rho | X), a reference block q(rho | X, r) used only in training, and a
decoder P(r | X, rho). A detection's measurement covariance is the sample covariance of residuals
drawn through encoder and decoder.
"""
import math
import time
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.config.schemas import CvaeConfig
from src.core.models.detection import SubpixelDetection
from src.core.models.radar import LabelSet, RdmImage
from src.nn import Adam, Dense, LayerNorm, Module, ReLU, Tensor, concat, no_grad
from src.utils.errors import DomainError, NumericalError, ShapeError
from src.utils.logging import logger
from src.utils.rng import derive_rng

LOG_2PI = math.log(2.0 * math.pi)
RESIDUAL_DIM = 2


class GaussianParams(NamedTuple):
    """Diagonal Gaussian; both fields are (N, dim)."""
    mean: Tensor
    log_var: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)


@dataclass(frozen=True)
class Residual:
    r: np.ndarray
    features: np.ndarray
    endo: bool


class GaussianBlock(Module):
    """(Dense, LayerNorm, ReLU) hidden layers and a zero-initialized head emitting mean and log-variance."""
    kind = "gaussian_block"

    def __init__(self, in_features: int, out_dim: int, hidden_sizes: Sequence[int], rng: np.random.Generator,
                 name: str = "block"):
        super().__init__()
        self.name = name
        self.in_features, self.out_dim = in_features, out_dim
        self.hidden = []
        width = in_features
        for i, size in enumerate(hidden_sizes):
            self.hidden.append(Dense(width, size, rng, name=f"{name}.dense{i}"))
            self.hidden.append(LayerNorm(size, name=f"{name}.norm{i}"))
            width = size
        self.relu = ReLU()
        self.head = Dense(width, 2 * out_dim, rng, zero_init=True, name=f"{name}.head")

    def forward(self, x: Tensor) -> GaussianParams:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}) input, got {x.shape}")
        for dense, norm in zip(self.hidden[::2], self.hidden[1::2]):
            x = self.relu(norm(dense(x)))
        out = self.head(x)
        return GaussianParams(out[:, :self.out_dim], out[:, self.out_dim:])

    def describe(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_dim}


class CvaeTwin(Module):
    kind = "cvae_twin"

    def __init__(self, feature_dim: int, cfg: CvaeConfig, rng: np.random.Generator, name: str):
        super().__init__()
        self.feature_dim, self.latent_dim = feature_dim, cfg.latent_dim
        self.encoder = GaussianBlock(feature_dim, cfg.latent_dim, cfg.hidden_sizes, rng, name=f"{name}.encoder")
        self.reference = GaussianBlock(feature_dim + RESIDUAL_DIM, cfg.latent_dim, cfg.hidden_sizes, rng,
                                       name=f"{name}.reference")
        self.decoder = GaussianBlock(feature_dim + cfg.latent_dim, RESIDUAL_DIM, cfg.hidden_sizes, rng,
                                     name=f"{name}.decoder")

    def encode(self, features: Tensor) -> GaussianParams:
        return self.encoder(features)

    def refer(self, features: Tensor, r: Tensor) -> GaussianParams:
        return self.reference(concat([features, r]))

    def decode(self, features: Tensor, rho: Tensor) -> GaussianParams:
        return self.decoder(concat([features, rho]))


class ResidualCvae(Module):
    """Endo and exo twins; they share no parameters."""
    kind = "residual_cvae"

    def __init__(self, feature_dim: int, cfg: CvaeConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        self.endo = CvaeTwin(feature_dim, cfg, rng, name="endo")
        self.exo = CvaeTwin(feature_dim, cfg, rng, name="exo")

    def twin(self, endo: bool) -> CvaeTwin:
        return self.endo if endo else self.exo

    def describe(self):
        return {"kind": self.kind, "feature_dim": self.feature_dim, "latent_dim": self.cfg.latent_dim,
                "hidden_sizes": list(self.cfg.hidden_sizes)}


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) per row, summed over dimensions."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"kl: q has shape {q.mean.shape}, p has shape {p.mean.shape}")
    var_q, var_p = q.log_var.exp(), p.log_var.exp()
    diff = q.mean - p.mean
    terms = p.log_var - q.log_var + (var_q + diff * diff) / var_p - 1.0
    return terms.sum(axis=-1) * 0.5


def gaussian_nll(r: Tensor, params: GaussianParams) -> Tensor:
    """-log N(r; mean, diag(exp(log_var))) per row."""
    diff = r - params.mean
    terms = params.log_var + diff * diff / params.log_var.exp() + LOG_2PI
    return terms.sum(axis=-1) * 0.5


def _twin_loss(twin: CvaeTwin, features: np.ndarray, r: np.ndarray, noise: np.ndarray) -> Tuple[Tensor, Tensor]:
    x, rt = Tensor(features), Tensor(r)
    prior = twin.encode(x)
    posterior = twin.refer(x, rt)
    rho = posterior.mean + (posterior.log_var * 0.5).exp() * Tensor(noise)
    kl = kl_diag_gaussians(posterior, prior)
    nll = gaussian_nll(rt, twin.decode(x, rho))
    return kl.sum(), nll.sum()


def cvae_loss(
    model: ResidualCvae,
    features: np.ndarray,
    r: np.ndarray,
    endo: np.ndarray,
    noise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Negative evidence lower bound averaged over the batch; both twins contribute their rows.

    `noise` (N, latent) fixes the reparameterization draw; otherwise it is taken from `rng`.
    """
    dtype = model.endo.encoder.head.weight.dtype
    features = np.asarray(features, dtype=dtype)
    r = np.asarray(r, dtype=dtype)
    endo = np.asarray(endo, dtype=bool)
    n = len(r)
    if n == 0:
        raise ValueError("cvae_loss needs a non-empty batch")
    if noise is None:
        noise = (rng if rng is not None else np.random.default_rng()).standard_normal((n, model.cfg.latent_dim))
    noise = np.asarray(noise, dtype=dtype)

    total = None
    for flag in (True, False):
        rows = np.flatnonzero(endo == flag)
        if rows.size == 0:
            continue
        kl, nll = _twin_loss(model.twin(flag), features[rows], r[rows], noise[rows])
        part = kl + nll
        total = part if total is None else total + part
    return total / float(n)


def sample_residuals(
    model: ResidualCvae,
    features: np.ndarray,
    endo: bool,
    n: int,
    rng: np.random.Generator
) -> np.ndarray:
    """n draws r' ~ P(r' | X', rho), rho ~ p(rho | X'); draw i uses the i-th child stream of `rng`."""
    if n <= 0:
        return np.zeros((0, RESIDUAL_DIM))
    twin = model.twin(endo)
    latent = model.cfg.latent_dim
    eps = np.stack([child.standard_normal(latent + RESIDUAL_DIM) for child in rng.spawn(n)])
    dtype = twin.encoder.head.weight.dtype
    x = Tensor(np.broadcast_to(np.asarray(features, dtype=dtype), (n, model.feature_dim)).copy())
    with no_grad():
        prior = twin.encode(x)
        rho = prior.mean.data + np.sqrt(prior.variance) * eps[:, :latent]
        out = twin.decode(x, Tensor(rho.astype(dtype)))
        draws = out.mean.data + np.sqrt(out.variance) * eps[:, latent:]
    return draws.astype(np.float64)


def estimate_R(
    model: ResidualCvae,
    features: np.ndarray,
    endo: bool,
    n: int,
    rng: np.random.Generator
) -> np.ndarray:
    """Symmetrized sample covariance of `n` residual draws."""
    if n < 2:
        raise DomainError(f"Covariance estimation needs at least 2 samples, got {n}")
    draws = sample_residuals(model, features, endo, n, rng)
    cov = np.cov(draws, rowvar=False)
    return 0.5 * (cov + cov.T)


class CvaeUncertainty:
    """Per-detection covariance source for the tracker."""

    def __init__(self, model: ResidualCvae, samples: int, root_seed: int):
        self.model = model.eval()
        self.samples = samples
        self.root_seed = root_seed

    def covariance(self, detection: SubpixelDetection, stream: str) -> np.ndarray:
        return estimate_R(self.model, detection.features, detection.endo, self.samples,
                          derive_rng(self.root_seed, f"cvae/sample/{stream}"))


def collect_residuals(
    detections: Sequence[SubpixelDetection],
    labels: LabelSet
) -> List[Residual]:
    """Truth-minus-estimate residuals of detections whose peak pixel is a label pixel."""
    by_pixel = {(t.row, t.col): t for t in labels.targets}
    out = []
    for det in detections:
        truth = by_pixel.get(det.pixel)
        if truth is None:
            continue
        out.append(Residual(
            r=np.array([truth.range - det.range, truth.range_rate - det.range_rate]),
            features=np.asarray(det.features, dtype=np.float32),
            endo=det.endo,
        ))
    return out


def collect_dataset_residuals(
    detect,
    samples: Iterable[Tuple[RdmImage, LabelSet]],
    threshold: float
) -> List[Residual]:
    """Run `detect(image, threshold)` over (image, labels) pairs and pool the matched residuals."""
    residuals: List[Residual] = []
    for image, labels in tqdm(samples, desc="collecting residuals", leave=False):
        detections, _ = detect(image, threshold)
        residuals.extend(collect_residuals(detections, labels))
    endo = sum(r.endo for r in residuals)
    logger.info(f"Collected {len(residuals)} residuals ({endo} endo, {len(residuals) - endo} exo)")
    return residuals


def stack_residuals(residuals: Sequence[Residual]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not residuals:
        raise ValueError("No residuals to stack")
    features = np.stack([r.features for r in residuals]).astype(np.float32)
    r = np.stack([r.r for r in residuals]).astype(np.float32)
    endo = np.array([r.endo for r in residuals], dtype=bool)
    return features, r, endo


def train_cvae(
    model: ResidualCvae,
    residuals: Sequence[Residual],
    cfg: CvaeConfig,
    seed: int,
    optimizer: Optional[Adam] = None
) -> List[float]:
    """Adam on the negative ELBO; only the CVAE's parameters are optimized."""
    features, r, endo = stack_residuals(residuals)
    n = len(r)
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    model.train()
    curve = []
    for epoch in tqdm(range(cfg.epochs), desc="cvae", leave=False):
        order = derive_rng(seed, f"cvae/shuffle/epoch/{epoch}").permutation(n)
        noise_rng = derive_rng(seed, f"cvae/noise/epoch/{epoch}")
        started = time.perf_counter()
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            optimizer.zero_grad()
            loss = cvae_loss(model, features[idx], r[idx], endo[idx], rng=noise_rng)
            value = loss.item()
            if not np.isfinite(value):
                logger.error(f"Non-finite CVAE loss at epoch {epoch + 1}, batch {b // cfg.batch_size}: {value}")
                raise NumericalError(f"CVAE training diverged at epoch {epoch + 1} (loss={value})")
            loss.backward()
            optimizer.step()
            total += value * len(idx)
        curve.append(total / n)
        logger.debug(f"CVAE epoch {epoch + 1}: loss={curve[-1]:.4f} ({time.perf_counter() - started:.2f}s)")
    logger.info(f"CVAE trained on {n} residuals for {cfg.epochs} epochs; final loss {curve[-1]:.4f}")
    model.eval()
    return curve
