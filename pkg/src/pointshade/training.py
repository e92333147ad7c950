"""Three-term reconstruction loss, Adam loop, and noise augmentation.

Loss = w1 * MSE(rgb) + w2 * mean|per-pixel RGB magnitude difference|
     + w3 * mean|alpha difference|,
where the magnitude is the Euclidean norm of the RGB triple at each pixel.
Term weights default to 1/1/1 and are configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .network import RenderModel
from .projection import PointCloud


@dataclass(frozen=True)
class LossWeights:
    w_mse_rgb: float = 1.0
    w_l1_magnitude: float = 1.0
    w_l1_alpha: float = 1.0

    def __post_init__(self):
        if min(self.w_mse_rgb, self.w_l1_magnitude, self.w_l1_alpha) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_mse_rgb == self.w_l1_magnitude == self.w_l1_alpha == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_fraction: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0  # 0 disables

    def __post_init__(self):
        # lr 0 is allowed: a no-op optimizer run must leave weights bitwise
        # unchanged, which is itself a tested contract
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("noise_fraction must be in [0, 1)")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the failing step."""


def loss(pred: ad.Tensor, target: ad.Tensor | np.ndarray, weights: LossWeights
         ) -> tuple[ad.Tensor, tuple[float, float, float]]:
    """Total loss plus the three unweighted component values.

    Accepts (4, H, W) or (N, 4, H, W); the channel axis is -3 with RGB in
    channels 0..2 and alpha in channel 3.
    """
    if not isinstance(target, ad.Tensor):
        target = ad.Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[-3] != 4:
        raise ValueError(f"expected 4 channels at axis -3, got {pred.shape}")
    caxis = pred.ndim - 3

    rgb_p = ad.narrow(pred, caxis, 0, 3)
    rgb_t = ad.narrow(target, caxis, 0, 3)
    a_p = ad.narrow(pred, caxis, 3, 1)
    a_t = ad.narrow(target, caxis, 3, 1)

    mse_rgb = ad.tmean(ad.square(ad.sub(rgb_p, rgb_t)))
    mag_p = ad.sqrt(ad.tsum(ad.square(rgb_p), axes=caxis, keepdims=True))
    mag_t = ad.sqrt(ad.tsum(ad.square(rgb_t), axes=caxis, keepdims=True))
    l1_mag = ad.tmean(ad.absolute(ad.sub(mag_p, mag_t)))
    l1_alpha = ad.tmean(ad.absolute(ad.sub(a_p, a_t)))

    total = ad.add(
        ad.add(ad.mul(mse_rgb, weights.w_mse_rgb), ad.mul(l1_mag, weights.w_l1_magnitude)),
        ad.mul(l1_alpha, weights.w_l1_alpha),
    )
    return total, (float(mse_rgb.data), float(l1_mag.data), float(l1_alpha.data))


def add_uniform_noise(cloud: PointCloud, rho: float, rng: np.random.Generator) -> PointCloud:
    """Append ceil(rho*N) points drawn uniformly in the cloud's AABB."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("noise fraction must be in [0, 1)")
    n = len(cloud)
    extra = math.ceil(rho * n)
    if extra == 0:
        return cloud
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    noise = rng.uniform(lo, hi, size=(extra, 3))
    return PointCloud(np.vstack([cloud.points, noise]))


class Adam:
    """Adam with bias correction; a zero gradient leaves values unchanged."""

    def __init__(self, params: Sequence[ad.Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.assign(p.data - update)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class LossRecord:
    step: int
    total: float
    mse_rgb: float
    l1_mag: float
    l1_alpha: float


def train(
    dataset: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    config: TrainConfig,
    model: RenderModel,
    checkpoint: Callable[[int, RenderModel], None] | None = None,
    log: Callable[[LossRecord], None] | None = None,
) -> list[LossRecord]:
    """Adam updates over (zbuffer, settings-vector, target-RGBA) triples.

    zbuffer is (H, W), settings (settings_length,), target (4, H, W).
    Fully reproducible from config.seed; a non-finite loss aborts with the
    offending step and component values in the exception message.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history: list[LossRecord] = []

    for step in range(config.steps):
        idx = rng.integers(0, len(samples), size=min(config.batch_size, len(samples)))
        z = np.stack([samples[i][0] for i in idx])[:, None]
        s = np.stack([samples[i][1] for i in idx])
        target = np.stack([samples[i][2] for i in idx])

        opt.zero_grad()
        with ad.GradTape() as tape:
            pred = model.forward_batch(z, s)
            total, comps = loss(pred, target, config.weights)
        total_val = float(total.data)
        if not math.isfinite(total_val):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: total={total_val} components={comps}"
            )
        tape.backward(total)
        opt.step()

        record = LossRecord(step, total_val, *comps)
        history.append(record)
        if log is not None:
            log(record)
        if checkpoint is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint(step, model)
    return history


def write_loss_csv(history: Sequence[LossRecord], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "mse_rgb", "l1_mag", "l1_alpha"])
        for rec in history:
            writer.writerow([rec.step, rec.total, rec.mse_rgb, rec.l1_mag, rec.l1_alpha])
