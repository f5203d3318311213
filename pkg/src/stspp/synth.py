"""Synthetic instance-segmentation scenes: rectangles, ellipses and triangles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Annotation, ImageRecord
from .dataset import Dataset

SHAPES = ("rectangle", "ellipse", "triangle")


@dataclass(frozen=True)
class SynthConfig:
    image_side: int = 96
    classes: tuple[str, ...] = SHAPES
    mixture: Optional[tuple[float, ...]] = None
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.2, 0.5)   # box side as a fraction of the image side
    aspect_range: tuple[float, float] = (0.6, 1.6)  # w / h
    co_centered: bool = False                       # place a tall/wide pair sharing one center
    min_visible: float = 0.5
    n_train: int = 500
    n_val: int = 100
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.image_side < 32:
            raise ValueError("image_side must be >= 32")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("train/val counts must be >= 1")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValueError("objects_per_image must satisfy 1 <= lo <= hi")
        if self.mixture is not None:
            if len(self.mixture) != len(self.classes) or min(self.mixture) < 0 or sum(self.mixture) <= 0:
                raise ValueError("mixture must give one nonnegative weight per class")

    @property
    def probs(self) -> np.ndarray:
        m = np.ones(len(self.classes)) if self.mixture is None else np.asarray(self.mixture, float)
        return m / m.sum()

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


class PlacementError(RuntimeError):
    pass


def rasterize(shape: str, cx: float, cy: float, w: float, h: float, side: int) -> np.ndarray:
    """Pixel-center rasterization of a shape inscribed in the given pixel-space box."""
    yy, xx = np.mgrid[:side, :side] + 0.5
    x0, y0 = cx - w / 2, cy - h / 2
    if shape == "rectangle":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if shape == "ellipse":
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        t = (yy - y0) / h
        return (t >= 0) & (t < 1) & (np.abs(xx - cx) <= t * w / 2)
    raise ValueError(f"unknown shape {shape!r}")


def _draw_box(rng, cfg: SynthConfig, aspect=None):
    n = cfg.image_side
    size = rng.uniform(*cfg.size_range) * n
    ar = aspect if aspect is not None else float(np.exp(rng.uniform(*np.log(cfg.aspect_range))))
    w = size * np.sqrt(ar)
    h = size / np.sqrt(ar)
    return min(w, n * 0.95), min(h, n * 0.95)


def _scene(rng: np.random.Generator, cfg: SynthConfig):
    n = cfg.image_side
    if cfg.co_centered:
        count = 2
    else:
        count = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    for _ in range(cfg.max_retries):
        objs = []
        if cfg.co_centered:
            cls_ids = rng.choice(len(cfg.classes), size=2, p=cfg.probs)
            size = rng.uniform(*cfg.size_range) * n * 1.2
            tall = (size / np.sqrt(2) / 1.1, size * np.sqrt(2) / 1.1)
            wide = (tall[1], tall[0])
            margin = max(tall[1], wide[0]) / 2
            cx = rng.uniform(margin, n - margin) if n - 2 * margin > 0 else n / 2
            cy = rng.uniform(margin, n - margin) if n - 2 * margin > 0 else n / 2
            for k, (w, h) in zip(cls_ids, (tall, wide)):
                objs.append((int(k), cx, cy, w, h))
        else:
            for _ in range(count):
                k = int(rng.choice(len(cfg.classes), p=cfg.probs))
                w, h = _draw_box(rng, cfg)
                cx = rng.uniform(w / 2, n - w / 2)
                cy = rng.uniform(h / 2, n - h / 2)
                objs.append((k, cx, cy, w, h))
            # keep object centers outside every other object's box
            clash = any(abs(a[1] - b[1]) < max(a[3], b[3]) / 2 and abs(a[2] - b[2]) < max(a[4], b[4]) / 2
                        for i, a in enumerate(objs) for b in objs[i + 1:])
            if clash:
                continue
        masks = [rasterize(cfg.classes[k], cx, cy, w, h, n) for k, cx, cy, w, h in objs]
        if any(not m.any() for m in masks):
            continue
        visible = []
        for i, m in enumerate(masks):
            v = m.copy()
            for later in masks[i + 1:]:
                v &= ~later
            visible.append(v)
        if all(v.sum() >= cfg.min_visible * m.sum() for v, m in zip(visible, masks)):
            return objs, visible
    raise PlacementError(f"could not place {count} objects after {cfg.max_retries} attempts")


def render_image(rng: np.random.Generator, cfg: SynthConfig, objs, visible) -> np.ndarray:
    n = cfg.image_side
    bg = rng.uniform(20, 90, size=3)
    img = np.broadcast_to(bg, (n, n, 3)).copy()
    img += rng.normal(0, 6, size=(n, n, 3))
    for (k, *_), v in zip(objs, visible):
        color = rng.uniform(130, 250, size=3)
        img[v] = color + rng.normal(0, 6, size=(int(v.sum()), 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_split(cfg: SynthConfig, count: int, rng: np.random.Generator, first_id: int = 0) -> Dataset:
    images, anns, pixels = [], {}, {}
    for i in range(count):
        image_id = first_id + i
        objs, visible = _scene(rng, cfg)
        pixels[image_id] = render_image(rng, cfg, objs, visible)
        images.append(ImageRecord(image_id, cfg.image_side, cfg.image_side))
        anns[image_id] = [Annotation.from_mask(k, v) for (k, *_), v in zip(objs, visible)]
    return Dataset(images, anns, pixels)


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Train and validation splits, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    train = generate_split(cfg, cfg.n_train, rng, 0)
    val = generate_split(cfg, cfg.n_val, rng, cfg.n_train)
    return train, val


def write_splits(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    from .dataset import save_dataset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = generate(cfg)
    paths = {"train": out_dir / "train.json", "val": out_dir / "val.json"}
    save_dataset(train, paths["train"])
    save_dataset(val, paths["val"])
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return paths
