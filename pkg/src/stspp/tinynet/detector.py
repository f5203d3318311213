"""A small single-shot grid predictor trained against the detection loss."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from ..augment import AugmentConfig, augment
from ..dataset import Dataset
from ..evaluation import EvalConfig, map_at
from ..loss import LossWeights, loss_backward, loss_forward, match
from ..postproc import PostprocConfig, postprocess
from ..shapecodec import ShapeCodec, codec_from_config
from ..targets import ANCHOR, AnchorSet, GridSpec, cell_channels, encode, unpack_predictions
from .layers import batchnorm, conv, leaky, maxpool
from .net import Net
from .optim import SGD, LrSchedule

TRACE_FIELDS = ("epoch", "step", "lr", "loss", "coord", "conf_noobj", "conf_obj", "class", "shape",
                "val_map50", "seconds")


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = ANCHOR
    S: int = 3
    codec: dict = field(default_factory=lambda: {"kind": "dt", "levels": 8, "code_side": 12,
                                                 "mask_side": 48})
    widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    epochs: int = 30
    batch: int = 8
    accumulate: int = 8
    lr_scale: float = 1.0
    clip_norm: Optional[float] = None     # global gradient-norm clipping per step
    weights: LossWeights = LossWeights()
    eval_every: int = 1
    time_budget: Optional[float] = None   # seconds; training stops after the epoch that crosses it
    augment: Optional[AugmentConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.S < 1 or self.epochs < 0 or self.batch < 1 or self.accumulate < 1:
            raise ValueError("S, batch and accumulate must be >= 1 and epochs >= 0")
        if not self.widths:
            raise ValueError("widths must be nonempty")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown detector config fields: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if d.get("augment") is not None and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class DetectorResult:
    net: Net
    spec: GridSpec
    codec: ShapeCodec
    config: DetectorConfig
    trace: list[dict] = field(default_factory=list)

    @property
    def final_map50(self) -> float:
        vals = [r["val_map50"] for r in self.trace if r["val_map50"] == r["val_map50"]]
        return vals[-1] if vals else float("nan")


def build_predictor(image_side: int, channels: int, spec: GridSpec, mode: str,
                    widths=(16, 32, 64, 128, 128)) -> Net:
    """A stride-2 stem, CONV/BN/leaky/MAXPOOL blocks down to the ``S x S`` grid,
    one more CONV block at grid resolution and a 1x1 linear prediction head."""
    ratio = image_side / spec.S
    downs = int(round(math.log2(ratio))) if ratio >= 1 else -1
    if downs < 1 or 2 ** downs * spec.S != image_side:
        raise ValueError(f"image side {image_side} must be S * 2^k with k >= 1 (S={spec.S})")
    blocks = downs  # stem (stride 2) + downs - 1 pooled blocks + one block at grid resolution

    def width(i):
        return widths[min(i, len(widths) - 1)]

    layers = [conv(width(0), 3, 2), batchnorm(), leaky()]
    for i in range(1, blocks):
        layers += [maxpool(2, 2), conv(width(i), 3, 1), batchnorm(), leaky()]
    layers += [conv(width(blocks), 3, 1), batchnorm(), leaky()]
    layers.append(conv(cell_channels(spec, mode), 1, 1))
    return Net(layers, (channels, image_side, image_side))


def to_input(pixels: np.ndarray) -> np.ndarray:
    """(H, W, C) uint8 image to a centered (C, H, W) float array."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return x.transpose(2, 0, 1) / 255.0 - 0.5


def grid_to_flat(out: np.ndarray) -> np.ndarray:
    """(N, channels, S, S) head output to cell-major flat prediction vectors."""
    return out.transpose(0, 2, 3, 1).reshape(out.shape[0], -1)


def flat_to_grid(flat: np.ndarray, channels: int, S: int) -> np.ndarray:
    return flat.reshape(flat.shape[0], S, S, channels).transpose(0, 3, 1, 2)


def predict(net: Net, images: list[np.ndarray], batch: int = 16) -> np.ndarray:
    rows = []
    for b in range(0, len(images), batch):
        x = np.stack([to_input(im) for im in images[b:b + batch]])
        rows.append(grid_to_flat(net.forward(x, train=False)))
    return np.concatenate(rows) if rows else np.zeros((0, 0))


def detect(net: Net, dataset: Dataset, spec: GridSpec, mode: str, codec: ShapeCodec,
           post: PostprocConfig = PostprocConfig()) -> dict:
    ids = dataset.image_ids
    preds = predict(net, [dataset.pixels[i] for i in ids])
    out = {}
    for image_id, pred in zip(ids, preds):
        rec = dataset.image(image_id)
        proposals = unpack_predictions(pred, spec, mode)
        out[image_id] = postprocess(proposals, codec, post, rec.width, rec.height)
    return out


def evaluate_map50(net, dataset, spec, mode, codec, classes=None) -> float:
    dets = detect(net, dataset, spec, mode, codec)
    return map_at(dataset.annotations, dets, 0.5, EvalConfig(criterion="mask"), classes).mAP


def _n_classes(*datasets: Dataset) -> int:
    ids = [a.class_id for ds in datasets for anns in ds.annotations.values() for a in anns]
    return max(ids) + 1 if ids else 1


def train_detector(train: Dataset, val: Optional[Dataset] = None,
                   config: DetectorConfig = DetectorConfig(),
                   n_classes: Optional[int] = None,
                   progress: Optional[Callable[[dict], None]] = None) -> DetectorResult:
    """Mini-batches of ``batch`` images, gradients accumulated over ``accumulate`` of them per step.

    The per-image loss gradients are averaged over the images of one step.
    The learning-rate table is the default schedule compressed so that its
    decay phases fall inside the planned number of steps, times ``lr_scale``.
    A trace row (loss terms and validation mAP at IoU 0.5) is emitted per epoch;
    row 0 describes the untrained net.
    """
    codec = codec_from_config(dict(config.codec))
    C = n_classes or _n_classes(train, *( [val] if val else []))
    spec = GridSpec(config.S, 2, C, codec.code_length)
    anchors = AnchorSet() if config.mode == ANCHOR else None
    rng = np.random.default_rng(config.seed)
    ids = train.image_ids
    first = train.image(ids[0])
    channels = np.asarray(train.pixels[ids[0]]).reshape(first.height, first.width, -1).shape[-1]
    net = build_predictor(first.width, channels, spec, config.mode, config.widths)
    net.init(int(rng.integers(2 ** 31)))
    head_ch = cell_channels(spec, config.mode, anchors)

    fixed_targets = None
    if config.augment is None:
        fixed_targets = {i: encode(train.annotations_for(i), spec, config.mode, anchors, codec) for i in ids}
    group = config.batch * config.accumulate
    steps_per_epoch = max(1, -(-len(ids) // group))
    total_steps = max(1, steps_per_epoch * config.epochs)
    schedule = LrSchedule().scaled(total_steps / 65_000, config.lr_scale)
    opt = SGD(schedule)
    result = DetectorResult(net, spec, codec, config)
    t0 = time.perf_counter()

    def emit(epoch, step, lr, sums, count):
        row = {"epoch": epoch, "step": step, "lr": lr}
        for k in ("loss", "coord", "conf_noobj", "conf_obj", "class", "shape"):
            row[k] = sums.get(k, float("nan")) / count if count else float("nan")
        if val is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            row["val_map50"] = evaluate_map50(net, val, spec, config.mode, codec, range(C))
        else:
            row["val_map50"] = float("nan")
        row["seconds"] = time.perf_counter() - t0
        result.trace.append(row)
        if progress:
            progress(row)

    emit(0, 0, 0.0, {}, 0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(ids))
        sums: dict[str, float] = {}
        lr = 0.0
        for g0 in range(0, len(order), group):
            chunk = order[g0:g0 + group]
            net.zero_grad()
            for b0 in range(0, len(chunk), config.batch):
                batch_ids = [ids[k] for k in chunk[b0:b0 + config.batch]]
                images, targets = [], []
                for i in batch_ids:
                    if fixed_targets is not None:
                        images.append(train.pixels[i])
                        targets.append(fixed_targets[i])
                    else:
                        img, anns, _ = augment(train.pixels[i], train.annotations_for(i), config.augment, rng)
                        images.append(img)
                        targets.append(encode(anns, spec, config.mode, anchors, codec))
                x = np.stack([to_input(im) for im in images])
                flat = grid_to_flat(net.forward(x, train=True))
                grad = np.empty_like(flat)
                for n, (pred, tgt) in enumerate(zip(flat, targets)):
                    m = match(pred, tgt, anchors)
                    parts = loss_forward(pred, tgt, config.weights, anchors, m).to_dict()
                    for k, v in parts.items():
                        sums["loss" if k == "total" else k] = sums.get("loss" if k == "total" else k, 0.0) + v
                    grad[n] = loss_backward(pred, tgt, config.weights, anchors, m)
                net.backward(flat_to_grid(grad, head_ch, spec.S))
            step += 1
            scale = 1.0 / len(chunk)
            if config.clip_norm is not None:
                norm = scale * math.sqrt(sum(float((g * g).sum()) for g in net.grads().values()))
                if norm > config.clip_norm:
                    scale *= config.clip_norm / norm
            lr = opt.step(net, step, grad_scale=scale)
        emit(epoch, step, lr, sums, len(ids))
        if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
            break
    return result
