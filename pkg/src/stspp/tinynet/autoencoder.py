"""Denoising shape autoencoder: binary masks to an M-dimensional embedding and back."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from ..core import iou_mask
from ..loss import bce
from ..synth import rasterize
from .layers import dense, leaky, sigmoid
from .net import Net
from .optim import SGD, LrSchedule


@dataclass(frozen=True)
class AutoencoderConfig:
    M: int = 20
    hidden: int = 128
    epochs: int = 200
    batch: int = 8
    noise_rate: float = 0.1
    lr: float = 0.05
    decay_at: tuple[float, ...] = (0.5, 0.75)   # fractions of training where the rate halves
    momentum: float = 0.9
    weight_decay: float = 5e-4
    copies: int = 1              # corrupted copies per mask, drawn once before training
    resample: bool = False       # redraw the corruption every epoch instead
    seed: int = 0

    def __post_init__(self):
        if self.copies < 1:
            raise ValueError("copies must be >= 1")
        if self.M < 2:
            raise ValueError("embedding size M must be >= 2")
        if self.epochs < 0 or self.batch < 1 or self.hidden < 1:
            raise ValueError("epochs >= 0, batch >= 1 and hidden >= 1 required")
        if not 0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown autoencoder config fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class AutoencoderResult:
    encoder: Net
    decoder: Net
    side: int
    epoch_bce: list[float] = field(default_factory=list)   # per-pixel mean, one entry per epoch

    @property
    def final_bce(self) -> float:
        return self.epoch_bce[-1] if self.epoch_bce else float("nan")

    def encode(self, masks: np.ndarray) -> np.ndarray:
        x = np.asarray(masks, dtype=np.float64).reshape(-1, 1, self.side, self.side)
        return self.encoder.forward(x).reshape(len(x), -1)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.float64)
        probs = self.decoder.forward(codes.reshape(len(codes), -1, 1, 1))
        return probs.reshape(len(codes), self.side, self.side)

    def reconstruct(self, masks: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(masks)) >= 0.5


def build_autoencoder(side: int, M: int, hidden: int = 128) -> tuple[Net, Net]:
    encoder = Net([dense(hidden), leaky(), dense(M)], (1, side, side))
    decoder = Net([dense(hidden), leaky(), dense(side * side), sigmoid()], (M, 1, 1))
    return encoder, decoder


def random_blobs(count: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Roughly centered rectangles, ellipses and triangles of varied size and aspect."""
    shapes = ("rectangle", "ellipse", "triangle")
    out = np.zeros((count, side, side), dtype=bool)
    for i in range(count):
        kind = shapes[i % 3]
        w = rng.uniform(0.35, 0.95) * side
        h = rng.uniform(0.35, 0.95) * side
        cx = side / 2 + rng.uniform(-0.05, 0.05) * side
        cy = side / 2 + rng.uniform(-0.05, 0.05) * side
        out[i] = rasterize(kind, cx, cy, w, h, side)
    return out


def centered_disc(side: int, radius_frac: float = 0.35) -> np.ndarray:
    return rasterize("ellipse", side / 2, side / 2, 2 * radius_frac * side, 2 * radius_frac * side, side)


def flip_noise(masks: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    return np.logical_xor(masks, rng.random(masks.shape) < rate)


def step_decay(lr: float, decay_at: Sequence[float], total_steps: int) -> LrSchedule:
    bounds = sorted({max(1, int(round(f * total_steps))) for f in decay_at if 0 < f < 1})
    rows, first = [], 1
    for k, last in enumerate(bounds + [max(total_steps, bounds[-1] + 1 if bounds else 1)]):
        if last >= first:
            rows.append((first, last, lr * 0.5 ** k))
            first = last + 1
    return LrSchedule(tuple(rows))


def train_autoencoder(masks: Sequence[np.ndarray] | np.ndarray,
                      config: AutoencoderConfig = AutoencoderConfig()) -> AutoencoderResult:
    """Train on flip-corrupted inputs to reconstruct the clean masks under per-pixel BCE.

    ``epoch_bce`` records the mean per-pixel training BCE of each epoch; the
    entry for epoch 0 (before any update) is included first so that a
    zero-epoch run still reports a value.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3 or masks.shape[0] == 0 or masks.shape[1] != masks.shape[2]:
        raise ValueError("masks must be a nonempty (n, m, m) stack")
    n, side, _ = masks.shape
    rng = np.random.default_rng(config.seed)
    encoder, decoder = build_autoencoder(side, config.M, config.hidden)
    encoder.init(int(rng.integers(2 ** 31)))
    decoder.init(int(rng.integers(2 ** 31)))
    clean = np.repeat(masks, config.copies, axis=0)
    n = len(clean)
    steps_per_epoch = -(-n // config.batch)
    sched = step_decay(config.lr, config.decay_at, config.epochs * steps_per_epoch)
    opt_e = SGD(sched, config.momentum, config.weight_decay)
    opt_d = SGD(sched, config.momentum, config.weight_decay)
    pixels = side * side

    def batch_loss(idx, noisy, train):
        x = noisy[idx].reshape(len(idx), 1, side, side).astype(np.float64)
        code = encoder.forward(x, train)
        probs = decoder.forward(code, train).reshape(len(idx), 1, side, side)
        loss, grad = bce(probs, target[idx])
        return loss / (len(idx) * pixels), grad / (len(idx) * pixels)

    result = AutoencoderResult(encoder, decoder, side)
    target = clean.reshape(n, 1, side, side).astype(np.float64)
    noisy = flip_noise(clean, config.noise_rate, rng)
    result.epoch_bce.append(batch_loss(np.arange(n), noisy, False)[0])
    step = 0
    for _ in range(config.epochs):
        if config.resample:
            noisy = flip_noise(clean, config.noise_rate, rng)
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, config.batch):
            idx = order[b:b + config.batch]
            encoder.zero_grad()
            decoder.zero_grad()
            loss, grad = batch_loss(idx, noisy, True)
            total += loss * len(idx)
            g = decoder.backward(grad.reshape(len(idx), pixels, 1, 1))
            encoder.backward(g)
            step += 1
            opt_d.step(decoder, step)
            opt_e.step(encoder, step)
        result.epoch_bce.append(total / n)
    return result


def reconstruction_iou(result: AutoencoderResult, masks: np.ndarray) -> list[float]:
    rec = result.reconstruct(masks)
    return [iou_mask(a, b) for a, b in zip(rec, np.asarray(masks, dtype=bool))]


def default_training_set(count: int = 64, side: int = 32, seed: Optional[int] = 0) -> np.ndarray:
    return random_blobs(count, side, np.random.default_rng(seed))
