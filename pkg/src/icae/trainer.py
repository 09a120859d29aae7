"""Rate-distortion training: dataset ingestion, patch sampling, loss, Adam.

The loss is R + lambda * D with R the noise-proxy rate in bits per pixel
and D the mean squared error scaled to the 0-255 range, so lambda = 0.01
weights the terms as in the reference operating point. Training uses
additive-uniform-noise quantization only; hard rounding is reserved for
the actual coder.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, square, tmean, zero_grads
from .entropy import quantize, rate_bits_tensor
from .images import UnreadableImageError, UnsupportedImageError, load_rgb8, srgb_to_linear
from .model import CodecModel
from .transforms import ArchConfig, forward

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass
class TrainConfig:
    rd_lambda: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 8
    patch_size: int = 256
    iterations: int = 1000
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.rd_lambda <= 0 or self.learning_rate <= 0:
            raise ValueError("rd_lambda and learning_rate must be positive")
        if min(self.batch_size, self.patch_size, self.log_interval) < 1 or self.iterations < 0:
            raise ValueError("batch_size, patch_size, log_interval must be positive")
        if self.patch_size % 64:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 64")


@dataclass
class CurvePoint:
    iteration: int
    bpp_proxy: float
    mse_255: float
    loss: float


@dataclass
class CurveLog:
    points: list[CurvePoint] = field(default_factory=list)

    def append(self, point: CurvePoint):
        if self.points and point.iteration <= self.points[-1].iteration:
            raise ValueError("curve iterations must be strictly increasing")
        self.points.append(point)

    def to_csv(self) -> str:
        lines = ["iteration,bpp_proxy,mse_255,loss"]
        for p in self.points:
            lines.append(f"{p.iteration},{p.bpp_proxy:.6f},{p.mse_255:.6f},{p.loss:.6f}")
        return "\n".join(lines) + "\n"


def ingest_dataset(directory, min_size: int = 256) -> list[np.ndarray]:
    """Load training images as linear-RGB float32 arrays in [0, 1].

    8-bit sRGB inputs are linearized with the standard piecewise transfer
    function. Unreadable files are skipped with a warning; images smaller
    than ``min_size`` on either side are skipped; an alpha channel is an
    error; an empty usable set is an error.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    skipped = 0
    for path in paths:
        try:
            rgb8 = load_rgb8(path)
        except (UnreadableImageError, UnsupportedImageError) as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        if min(rgb8.shape[0], rgb8.shape[1]) < min_size:
            logger.warning("skipping %s: smaller than %dx%d", path.name, min_size, min_size)
            skipped += 1
            continue
        images.append(srgb_to_linear(rgb8))
    if not images:
        raise ValueError(
            f"no usable training images in {directory} "
            f"({len(paths)} candidates, {skipped} skipped)"
        )
    return images


def sample_patch(image: np.ndarray, rng: np.random.Generator, patch_size: int = 256) -> np.ndarray:
    """Uniformly random patch_size x patch_size crop (HxWxC)."""
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} smaller than patch size {patch_size}")
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    return image[top : top + patch_size, left : left + patch_size, :]


def rd_loss(
    x: Tensor,
    x_hat: Tensor,
    y_probs: Tensor,
    z_probs: Tensor,
    rd_lambda: float,
    num_pixels: int,
) -> tuple[Tensor, float, float]:
    """Loss R + lambda*D; returns (loss, bpp proxy, mse on the 255 scale)."""
    if x.data.shape != x_hat.data.shape:
        raise ValueError(f"shape mismatch: x {x.data.shape} vs x_hat {x_hat.data.shape}")
    if num_pixels <= 0:
        raise ValueError("num_pixels must be positive")
    rate = (rate_bits_tensor(y_probs) + rate_bits_tensor(z_probs)) * (1.0 / num_pixels)
    distortion = tmean(square(x_hat - x)) * (255.0 ** 2)
    loss = rate + distortion * rd_lambda
    return loss, float(rate.data), float(distortion.data)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_step(model: CodecModel, batch: Tensor, rd_lambda: float, rng: np.random.Generator):
    """One noise-quantized forward pass; returns (loss, bpp proxy, mse)."""
    y = forward(model.analysis, batch)
    y_noisy = quantize(y, "noise", rng)
    z = forward(model.hyper_analysis, y)
    z_noisy = quantize(z, "noise", rng)
    sigma = forward(model.hyper_synthesis, z_noisy)
    y_probs = model.conditional.likelihood(y_noisy, sigma)
    z_probs = model.prior.likelihood(z_noisy)
    x_hat = forward(model.synthesis, y_noisy)
    num_pixels = batch.data.shape[0] * batch.data.shape[2] * batch.data.shape[3]
    return rd_loss(batch, x_hat, y_probs, z_probs, rd_lambda, num_pixels)


def train(
    cfg: TrainConfig,
    dataset: list[np.ndarray],
    out_dir=None,
) -> tuple[CodecModel, CurveLog]:
    """Train a fresh model; optionally write checkpoints and the curve CSV.

    Deterministic for a fixed config: the same seed yields bit-identical
    checkpoints.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for img in dataset:
        if img.shape[0] < cfg.patch_size or img.shape[1] < cfg.patch_size:
            raise ValueError("dataset contains images smaller than the patch size; re-ingest")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = CodecModel.build(cfg.arch, seed=cfg.seed)
    params = model.parameters()
    optimizer = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    curve = CurveLog()

    for iteration in range(1, cfg.iterations + 1):
        patches = []
        for _ in range(cfg.batch_size):
            image = dataset[int(rng.integers(0, len(dataset)))]
            patches.append(sample_patch(image, rng, cfg.patch_size).transpose(2, 0, 1))
        batch = Tensor(np.ascontiguousarray(np.stack(patches), dtype=np.float32))

        zero_grads(params)
        loss, bpp_proxy, mse_255 = train_step(model, batch, cfg.rd_lambda, rng)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            norms = {f"p{i}": float(np.linalg.norm(p.data)) for i, p in enumerate(params)}
            raise RuntimeError(
                f"non-finite loss at iteration {iteration}; parameter norms: {norms}"
            )
        backward(loss)
        optimizer.step()

        if iteration % cfg.log_interval == 0 or iteration == cfg.iterations:
            curve.append(CurvePoint(iteration, bpp_proxy, mse_255, loss_val))
        if (
            out_dir is not None
            and cfg.checkpoint_interval > 0
            and iteration % cfg.checkpoint_interval == 0
            and iteration != cfg.iterations
        ):
            model.save(out_dir / f"model_{iteration:07d}.ckpt")

    if out_dir is not None:
        model.save(out_dir / "model.ckpt")
        (out_dir / "curve.csv").write_text(curve.to_csv())
    return model, curve


def write_manifest(path, cfg: TrainConfig, started: float, finished: float):
    import json

    payload = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(finished)),
        "wall_seconds": finished - started,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
