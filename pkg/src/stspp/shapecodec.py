"""Fixed-length shape representations: downsampled binary, radial, distance transform.

Every codec works on square ``mask_side x mask_side`` crops (see
:func:`stspp.core.crop_resize_mask`) and maps them to ``code_length`` reals.
A learned embedding codec backed by a trained autoencoder is also provided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .core import area_resample, bilinear_resize, resize_mask


# --------------------------------------------------------------------------
# Euclidean distance transform and its disc-superposition inverse
# --------------------------------------------------------------------------

def dt_euclidean(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest background pixel.

    Pixels outside the image count as background. Two separable passes: the
    column-wise distance to background, then a brute-force minimization of
    ``(x - x')**2 + g(x')**2`` along each row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return np.zeros(mask.shape)
    fg = np.pad(mask, 1, constant_values=False)
    h, w = fg.shape
    big = h + w
    g = np.where(fg, big, 0).astype(np.int64)
    for y in range(1, h):
        g[y] = np.where(fg[y], np.minimum(g[y], g[y - 1] + 1), 0)
    for y in range(h - 2, -1, -1):
        g[y] = np.minimum(g[y], g[y + 1] + 1)
    xs = np.arange(w)
    dx2 = (xs[:, None] - xs[None, :]) ** 2  # (x, x')
    g2 = g ** 2
    d2 = np.empty_like(g2)
    chunk = max(1, 2_000_000 // (w * w))
    for y in range(0, h, chunk):
        d2[y:y + chunk] = (dx2[None, :, :] + g2[y:y + chunk, None, :]).min(axis=2)
    return np.sqrt(d2[1:-1, 1:-1].astype(np.float64))


def dt_quantize(dtgrid: np.ndarray, levels: int) -> np.ndarray:
    """Nested level masks ``(levels, H, W)``: level ``r`` (1-based) is ``dt >= r``."""
    dtgrid = np.asarray(dtgrid, dtype=np.float64)
    if (dtgrid < 0).any():
        raise ValueError("distance grid must be nonnegative")
    radii = np.arange(1, levels + 1, dtype=np.float64)
    return dtgrid[None] >= radii[:, None, None]


@lru_cache(maxsize=None)
def disc(radius: int, side: int | None = None) -> np.ndarray:
    """Boolean disc ``{q : |q| < radius}`` on a ``side x side`` pixel grid (odd side)."""
    side = side or 2 * radius - 1
    c = side // 2
    yy, xx = np.mgrid[:side, :side]
    out = (yy - c) ** 2 + (xx - c) ** 2 < radius ** 2
    out.flags.writeable = False
    return out


def disc_filter_bank(levels: int) -> np.ndarray:
    """``(levels, 2l-1, 2l-1)`` float filters; filter ``r-1`` is the disc of radius ``r``."""
    side = 2 * levels - 1
    return np.stack([disc(r, side) for r in range(1, levels + 1)]).astype(np.float64)


def _check_nested(levels: np.ndarray) -> None:
    for r in range(1, levels.shape[0]):
        if (levels[r] & ~levels[r - 1]).any():
            raise ValueError(f"level masks are not nested at level {r + 1}")


def dt_reconstruct(levels: np.ndarray) -> np.ndarray:
    """Union of radius-``r`` discs drawn at every pixel of level mask ``r``."""
    levels = np.asarray(levels, dtype=bool)
    _check_nested(levels)
    out = np.zeros(levels.shape[1:], dtype=bool)
    for r in range(1, levels.shape[0] + 1):
        lvl = levels[r - 1]
        if not lvl.any():
            break
        out |= ndimage.binary_dilation(lvl, structure=disc(r))
    return out


def disc_convolve(grid: np.ndarray, radius: int) -> np.ndarray:
    return ndimage.convolve(np.asarray(grid, dtype=np.float64), disc(radius).astype(np.float64),
                            mode="constant", cval=0.0)


def dt_soft_reconstruct(level_probs: np.ndarray, weights) -> np.ndarray:
    """Fixed disc filtering of soft level maps, learned linear mix (+bias last), threshold 0."""
    level_probs = np.asarray(level_probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = level_probs.shape[0]
    if weights.shape != (n + 1,):
        raise ValueError(f"expected {n + 1} weights (levels + bias), got {weights.shape}")
    if level_probs.min(initial=0) < 0 or level_probs.max(initial=0) > 1:
        raise ValueError("level probabilities must lie in [0, 1]")
    acc = np.full(level_probs.shape[1:], weights[-1])
    for r in range(1, n + 1):
        if weights[r - 1] != 0:
            acc += weights[r - 1] * disc_convolve(level_probs[r - 1], r)
    return acc > 0


# --------------------------------------------------------------------------
# Codecs
# --------------------------------------------------------------------------

class ShapeCodec:
    """Base class: ``encode`` a ``mask_side`` square mask, ``decode`` to ``out_side``."""

    kind = "base"
    mask_side: int

    @property
    def code_length(self) -> int:
        raise NotImplementedError

    def encode(self, mask: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, code, out_side: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError

    def _check_mask(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.mask_side, self.mask_side):
            raise ValueError(f"{self.kind} codec expects {self.mask_side}x{self.mask_side} masks, "
                             f"got {mask.shape}")
        return mask

    def _check_code(self, code) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64).ravel()
        if code.size != self.code_length:
            raise ValueError(f"{self.kind} code must have length {self.code_length}, got {code.size}")
        return code


@dataclass
class BinaryCodec(ShapeCodec):
    side: int = 16
    mask_side: int = 64
    kind = "binary"

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("binary side must be >= 2")

    @property
    def code_length(self) -> int:
        return self.side * self.side

    def encode(self, mask):
        mask = self._check_mask(mask)
        m = self.mask_side
        return area_resample(mask.astype(float), 0, 0, m, m, self.side, self.side).ravel()

    def decode(self, code, out_side=None):
        code = self._check_code(code).reshape(self.side, self.side)
        out_side = out_side or self.mask_side
        if out_side == self.side:
            return code >= 0.5
        return bilinear_resize(code, out_side, out_side) >= 0.5

    def to_config(self):
        return {"kind": "binary", "side": self.side, "mask_side": self.mask_side}


@dataclass
class RadialCodec(ShapeCodec):
    """Ray lengths from the foreground centroid, normalized by half the mask side.

    The code is ``n_angles`` ray lengths followed by the centroid offset from
    the mask center (x, y), also normalized by half the side.
    """

    n_angles: int = 32
    mask_side: int = 64
    step: float = 0.05
    kind = "radial"

    def __post_init__(self):
        if self.n_angles < 4:
            raise ValueError("n_angles must be >= 4")

    @property
    def code_length(self) -> int:
        return self.n_angles + 2

    @property
    def angles(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_angles) / self.n_angles

    def encode(self, mask):
        mask = self._check_mask(mask)
        if not mask.any():
            raise ValueError("radial code undefined for an empty mask")
        m = self.mask_side
        ys, xs = np.nonzero(mask)
        cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
        if not mask[int(cy), int(cx)]:
            raise ValueError("radial code undefined: centroid lies outside the foreground")
        t = np.arange(0, m * math.sqrt(2) + self.step, self.step)
        ang = self.angles
        px = cx + np.cos(ang)[:, None] * t[None]
        py = cy + np.sin(ang)[:, None] * t[None]
        inside = (px >= 0) & (px < m) & (py >= 0) & (py < m)
        ix = np.clip(np.floor(px).astype(int), 0, m - 1)
        iy = np.clip(np.floor(py).astype(int), 0, m - 1)
        hit = inside & mask[iy, ix]
        last = np.where(hit.any(axis=1), (hit.shape[1] - 1) - np.argmax(hit[:, ::-1], axis=1), 0)
        # exit point of the last foreground pixel along the ray
        dist = t[last] + self.step
        half = m / 2
        return np.concatenate([dist / half, [(cx - half) / half, (cy - half) / half]])

    def decode(self, code, out_side=None):
        code = self._check_code(code)
        out_side = out_side or self.mask_side
        half = out_side / 2
        dist = np.clip(code[: self.n_angles], 0, None) * half
        cx = half + code[-2] * half
        cy = half + code[-1] * half
        vx = cx + dist * np.cos(self.angles)
        vy = cy + dist * np.sin(self.angles)
        yy, xx = np.mgrid[:out_side, :out_side] + 0.5
        return _fill_polygon(vx, vy, xx, yy)

    def to_config(self):
        return {"kind": "radial", "n_angles": self.n_angles, "mask_side": self.mask_side}


def _fill_polygon(vx, vy, xx, yy) -> np.ndarray:
    """Even-odd point-in-polygon test on the points ``(xx, yy)``."""
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(vx)
    for i in range(n):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % n], vy[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > yy) != (y1 > yy)
        xint = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xx < xint)
    return inside


@dataclass
class DtCodec(ShapeCodec):
    """Quantized distance transform on a ``code_side`` grid.

    Each code entry is the number of level masks covering that pixel divided
    by ``levels``; because the levels are nested, this count carries the full
    level stack.
    """

    levels: int = 8
    code_side: int = 16
    mask_side: int = 64
    kind = "dt"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.mask_side < 4 or self.code_side < 2:
            raise ValueError("mask_side must be >= 4 and code_side >= 2")

    @property
    def code_length(self) -> int:
        return self.code_side * self.code_side

    def level_masks(self, mask) -> np.ndarray:
        small = resize_mask(self._check_mask(mask), self.code_side)
        return dt_quantize(dt_euclidean(small), self.levels)

    def encode(self, mask):
        return self.level_masks(mask).sum(axis=0).ravel() / self.levels

    def code_to_levels(self, code) -> np.ndarray:
        code = self._check_code(code).reshape(self.code_side, self.code_side)
        counts = np.clip(np.floor(code * self.levels + 0.5), 0, self.levels)
        return counts[None] >= np.arange(1, self.levels + 1)[:, None, None]

    def decode(self, code, out_side=None):
        rec = dt_reconstruct(self.code_to_levels(code))
        out_side = out_side or self.mask_side
        if out_side == self.code_side:
            return rec
        return bilinear_resize(rec.astype(float), out_side, out_side) >= 0.5

    def to_config(self):
        return {"kind": "dt", "levels": self.levels, "code_side": self.code_side,
                "mask_side": self.mask_side}


class EmbeddingCodec(ShapeCodec):
    """Learned embedding: a trained encoder/decoder pair from the autoencoder trainer."""

    kind = "embedding"

    def __init__(self, encoder, decoder, side: int, mask_side: int = 64):
        self.encoder = encoder
        self.decoder = decoder
        self.side = side
        self.mask_side = mask_side

    @property
    def code_length(self) -> int:
        return int(self.encoder.output_shape[0])

    def encode(self, mask):
        small = resize_mask(self._check_mask(mask), self.side).astype(np.float64)
        return self.encoder.forward(small[None, None]).ravel()

    def decode(self, code, out_side=None):
        code = self._check_code(code)
        probs = self.decoder.forward(code[None, :, None, None]).reshape(self.side, self.side)
        out_side = out_side or self.mask_side
        if out_side == self.side:
            return probs >= 0.5
        return bilinear_resize(probs, out_side, out_side) >= 0.5

    def to_config(self):
        return {"kind": "embedding", "side": self.side, "mask_side": self.mask_side}


def codec_from_config(cfg: dict, **kwargs) -> ShapeCodec:
    """Build a codec from ``{kind: ..., params...}``.

    Embedding codecs need trained nets passed as ``encoder=`` / ``decoder=``.
    """
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    if kind == "binary":
        return BinaryCodec(**cfg)
    if kind == "radial":
        return RadialCodec(**cfg)
    if kind == "dt":
        return DtCodec(**cfg)
    if kind == "embedding":
        if "encoder" not in kwargs or "decoder" not in kwargs:
            raise ValueError("embedding codec requires trained encoder and decoder nets")
        return EmbeddingCodec(kwargs["encoder"], kwargs["decoder"], **cfg)
    raise ValueError(f"unknown codec kind {kind!r}")
