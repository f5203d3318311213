"""Geometry, mask and annotation primitives shared by the whole pipeline.

Masks are plain ``numpy`` boolean arrays of shape ``(height, width)``.
Boxes are normalized, center-format and immutable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Center-format box normalized to image width/height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: ({self.cx}, {self.cy})")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in normalized coordinates."""
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def to_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``[x0, x1) x [y0, y1)`` rounded and clamped to the image."""
        x0, y0, x1, y1 = self.corners()
        px0 = int(np.clip(np.floor(x0 * width + 0.5), 0, width))
        px1 = int(np.clip(np.floor(x1 * width + 0.5), 0, width))
        py0 = int(np.clip(np.floor(y0 * height + 0.5), 0, height))
        py1 = int(np.clip(np.floor(y1 * height + 0.5), 0, height))
        return px0, py0, px1, py1

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoundingBox":
        """Tight box of the foreground of ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("cannot take the bounding box of an empty mask")
        h, w = mask.shape
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        return cls.from_corners(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, alternating background/foreground, background first."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(int(r) for r in self.runs))
        if any(r < 0 for r in self.runs):
            raise ValueError("negative run length")
        if sum(self.runs) != self.width * self.height:
            raise ValueError(
                f"run lengths sum to {sum(self.runs)}, expected {self.width * self.height}")


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    if not runs:
        runs = [0]
    return RleMask(w, h, tuple(runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    if sum(rle.runs) != rle.width * rle.height:
        raise ValueError("run lengths do not match mask size")
    values = np.arange(len(rle.runs)) % 2 == 1
    flat = np.repeat(values, rle.runs)
    return flat.reshape(rle.height, rle.width)


def box_mask(box: BoundingBox, width: int, height: int) -> np.ndarray:
    """Rasterize a box as the set of pixels whose centers fall inside it."""
    x0, y0, x1, y1 = box.corners()
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    inside_x = (xs >= x0) & (xs < x1)
    inside_y = (ys >= y0) & (ys < y1)
    return inside_y[:, None] & inside_x[None, :]


def iou_box(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, inter / union))


def iou_box_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n,4)`` and ``(k,4)`` arrays of (cx, cy, w, h)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None])
    ih = np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return np.clip(out, 0.0, 1.0)


def iou_mask(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_mask_matrix(a: list[np.ndarray], b: list[np.ndarray]) -> np.ndarray:
    """Pairwise mask IoU; empty/empty pairs score 1."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    fa = np.stack([np.asarray(m, dtype=bool).ravel() for m in a]).astype(np.float64)
    fb = np.stack([np.asarray(m, dtype=bool).ravel() for m in b]).astype(np.float64)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("mask shapes differ")
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)


def _overlap(out0: np.ndarray, out1: np.ndarray, in0: np.ndarray, in1: np.ndarray) -> np.ndarray:
    """Length of overlap between each output interval and each input interval."""
    lo = np.maximum(out0[:, None], in0[None, :])
    hi = np.minimum(out1[:, None], in1[None, :])
    return np.clip(hi - lo, 0.0, None)


def area_resample(grid: np.ndarray, y0: float, x0: float, y1: float, x1: float,
                  out_h: int, out_w: int) -> np.ndarray:
    """Area-average of ``grid`` over the pixel-space window resampled to ``out_h x out_w``.

    Pixels outside ``grid`` contribute zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    dy = (y1 - y0) / out_h
    dx = (x1 - x0) / out_w
    oy = y0 + dy * np.arange(out_h + 1)
    ox = x0 + dx * np.arange(out_w + 1)
    ry = _overlap(oy[:-1], oy[1:], np.arange(h, dtype=float), np.arange(1, h + 1, dtype=float)) / dy
    rx = _overlap(ox[:-1], ox[1:], np.arange(w, dtype=float), np.arange(1, w + 1, dtype=float)) / dx
    return ry @ grid @ rx.T


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    return _bilinear_matrix(grid.shape[0], out_h) @ grid @ _bilinear_matrix(grid.shape[1], out_w).T


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Square resize of a mask: area average going down, bilinear going up, threshold 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if side <= min(h, w):
        vals = area_resample(mask, 0, 0, h, w, side, side)
    else:
        vals = bilinear_resize(mask, side, side)
    return vals >= 0.5 - 1e-9


def crop_resize_mask(mask: np.ndarray, box: BoundingBox, side: int) -> np.ndarray:
    """Crop ``mask`` to ``box`` and resample to ``side x side`` (area average, threshold 0.5)."""
    if side < 2:
        raise ValueError("side must be >= 2")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    x0, y0, x1, y1 = box.corners()
    if x1 <= 0 or y1 <= 0 or x0 >= 1 or y0 >= 1:
        raise ValueError("box lies fully outside the image")
    vals = area_resample(mask, y0 * h, x0 * w, y1 * h, x1 * w, side, side)
    return vals >= 0.5 - 1e-9


def paste_mask(code_mask: np.ndarray, box: BoundingBox, image_w: int, image_h: int) -> np.ndarray:
    """Scale ``code_mask`` into ``box`` on a blank ``image_h x image_w`` canvas."""
    code = np.asarray(code_mask, dtype=np.float64)
    ch, cw = code.shape
    x0, y0, x1, y1 = box.corners()
    x0, x1 = x0 * image_w, x1 * image_w
    y0, y1 = y0 * image_h, y1 * image_h
    by = y0 + (y1 - y0) / ch * np.arange(ch + 1)
    bx = x0 + (x1 - x0) / cw * np.arange(cw + 1)
    py = _overlap(np.arange(image_h, dtype=float), np.arange(1, image_h + 1, dtype=float), by[:-1], by[1:])
    px = _overlap(np.arange(image_w, dtype=float), np.arange(1, image_w + 1, dtype=float), bx[:-1], bx[1:])
    return (py @ code @ px.T) >= 0.5 - 1e-9


@dataclass
class Annotation:
    class_id: int
    bbox: BoundingBox
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if self.mask.any():
            h, w = self.mask.shape
            tight = BoundingBox.from_mask(self.mask)
            a = np.array(self.bbox.corners()) * [w, h, w, h]
            b = np.array(tight.corners()) * [w, h, w, h]
            if np.abs(a - b).max() > 1.0 + 1e-9:
                raise ValueError("bbox is not the tight box of the mask (1 px tolerance)")

    @classmethod
    def from_mask(cls, class_id: int, mask: np.ndarray) -> "Annotation":
        return cls(class_id, BoundingBox.from_mask(mask), mask)


@dataclass
class Detection:
    class_id: int
    confidence: float
    bbox: BoundingBox
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0,1]: {self.confidence}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file: Optional[str] = None
