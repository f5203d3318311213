"""Random affine and photometric augmentation of images with their instance masks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Annotation


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    translation: tuple[float, float] = (-0.15, 0.15)
    scale: tuple[float, float] = (1 / 1.2, 1.2)             # log-uniform
    flip_prob: float = 0.5
    intensity_scale: tuple[float, float] = (1 / 1.2, 1.2)   # log-uniform
    intensity_offset: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        for f in ("rotation_deg", "translation", "scale", "intensity_scale", "intensity_offset"):
            lo, hi = getattr(self, f)
            object.__setattr__(self, f, (float(lo), float(hi)))
            if lo > hi:
                raise ValueError(f"{f}: lower bound exceeds upper bound")
        if self.scale[0] <= 0 or self.intensity_scale[0] <= 0:
            raise ValueError("scale ranges must be positive")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def from_json(cls, path: str | Path) -> "AugmentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((0, 0), (0, 0), (1, 1), 0.0, (1, 1), (0, 0))


@dataclass(frozen=True)
class AugmentSample:
    angle_deg: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    flip: bool = False
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentSample:
    return AugmentSample(
        angle_deg=float(rng.uniform(*config.rotation_deg)),
        dx=float(rng.uniform(*config.translation)),
        dy=float(rng.uniform(*config.translation)),
        scale=_log_uniform(rng, *config.scale),
        flip=bool(rng.random() < config.flip_prob),
        intensity_scale=_log_uniform(rng, *config.intensity_scale),
        intensity_offset=float(rng.uniform(*config.intensity_offset)),
    )


def _source_coords(sample: AugmentSample, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (x, y) in continuous pixel coordinates for each output pixel center."""
    yy, xx = np.mgrid[:h, :w].astype(np.float64) + 0.5
    cx, cy = w / 2, h / 2
    u = (xx - cx - sample.dx * w) / sample.scale
    v = (yy - cy - sample.dy * h) / sample.scale
    if sample.angle_deg == 0:
        ru, rv = u, v
    else:
        a = math.radians(sample.angle_deg)
        c, s = math.cos(a), math.sin(a)
        ru, rv = c * u + s * v, -s * u + c * v
    if sample.flip:
        ru = -ru
    return ru + cx, rv + cy


def _warp_nearest(grid: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill) -> np.ndarray:
    h, w = grid.shape[:2]
    ix = np.floor(sx).astype(int)
    iy = np.floor(sy).astype(int)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.empty_like(grid)
    out[...] = fill
    out[ok] = grid[iy[ok], ix[ok]]
    return out


def _warp_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    fx, fy = sx - 0.5, sy - 0.5
    x0, y0 = np.floor(fx).astype(int), np.floor(fy).astype(int)
    ax, ay = fx - x0, fy - y0
    out = np.zeros(img.shape[:2] + img.shape[2:], dtype=np.float64)
    wsum = np.zeros(img.shape[:2])
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = np.where(ok, wx * wy, 0.0)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
            out += (wgt[..., None] * vals) if img.ndim == 3 else wgt * vals
            wsum += wgt
    # out-of-frame weight goes to the fill value
    missing = 1.0 - wsum
    out += (missing[..., None] * fill) if img.ndim == 3 else missing * fill
    return out


def apply_affine(image: np.ndarray, annotations: Sequence[Annotation],
                 sample: AugmentSample) -> tuple[np.ndarray, list[Annotation]]:
    """Rotate about the center, scale, translate and optionally flip image and masks.

    Out-of-frame pixels take the per-channel mean; masks use nearest-neighbour
    sampling and boxes are recomputed from the warped masks (empty ones dropped).
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    sx, sy = _source_coords(sample, h, w)
    fill = image.reshape(h * w, -1).mean(axis=0) if image.ndim == 3 else image.mean()
    warped = _warp_bilinear(image, sx, sy, fill)
    if np.issubdtype(image.dtype, np.integer):
        warped = np.clip(np.round(warped), np.iinfo(image.dtype).min, np.iinfo(image.dtype).max)
    warped = warped.astype(image.dtype)
    out_anns = []
    for ann in annotations:
        mask = _warp_nearest(ann.mask, sx, sy, False)
        if mask.any():
            out_anns.append(Annotation.from_mask(ann.class_id, mask))
    return warped, out_anns


def apply_photometric(image: np.ndarray, sample: AugmentSample) -> np.ndarray:
    out = np.clip(np.asarray(image, dtype=np.float64) * sample.intensity_scale
                  + sample.intensity_offset, 0, 255)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        return np.round(out).astype(np.asarray(image).dtype)
    return out


def augment(image, annotations, config: AugmentConfig, rng: np.random.Generator):
    sample = sample_params(config, rng)
    img, anns = apply_affine(image, annotations, sample)
    return apply_photometric(img, sample), anns, sample
