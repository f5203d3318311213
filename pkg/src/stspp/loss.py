"""The five-term detection/segmentation objective with analytic gradients.

All terms are sums of squares over the grid.  ``resp[i, j]`` is the product
of the cell-occupancy and best-fit indicators: in legacy mode the best of the
B predicted boxes (by IoU with the cell's ground truth), in anchor mode the
slot the ground truth was assigned to.  The matching, and the IoU used as the
confidence target, are held constant when differentiating.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import iou_box_arrays
from .targets import LEGACY, AnchorSet, GridSpec, TargetTensor, cell_to_image, layout_size, pred_view

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    noobj: float = 0.5
    obj: float = 1.0
    cls: float = 1.0
    shape: float = 0.15

    def __post_init__(self):
        if min(self.coord, self.noobj, self.obj, self.cls, self.shape) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_json(cls, path: str | Path) -> "LossWeights":
        doc = json.loads(Path(path).read_text())
        alias = {"lambda_coord": "coord", "lambda_noobj": "noobj", "lambda_obj": "obj",
                 "lambda_class": "cls", "class": "cls", "lambda_shape": "shape"}
        return cls(**{alias.get(k, k): float(v) for k, v in doc.items()})


@dataclass
class MatchResult:
    resp: np.ndarray      # (cells, slots) 0/1: mu_i * nu_ij
    best: np.ndarray      # (cells,) best slot index, -1 where the cell holds no object
    iou: np.ndarray       # (cells, slots) IoU of each predicted box with the cell/slot ground truth
    mu: np.ndarray        # (cells,) or (cells, slots) occupancy
    gt_slot: np.ndarray   # (cells, slots) index into target slots supplying the ground truth


@dataclass
class LossBreakdown:
    coord: float
    conf_noobj: float
    conf_obj: float
    cls: float
    shape: float
    total: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d


def _check(pred, target: TargetTensor, anchors) -> None:
    n = layout_size(target.spec, target.mode, anchors or target.anchors)
    if np.asarray(pred).size != n:
        raise ValueError(f"prediction length {np.asarray(pred).size} does not match target layout {n}")


def match(pred: np.ndarray, target: TargetTensor, anchors: Optional[AnchorSet] = None) -> MatchResult:
    anchors = anchors or target.anchors
    _check(pred, target, anchors)
    spec = target.spec
    v = pred_view(np.asarray(pred, dtype=float), spec, target.mode, anchors)
    pboxes = cell_to_image(v.box, spec.S)            # (cells, slots, 4)
    gboxes = target.image_boxes()                    # (cells, tslots, 4)
    cells, slots = v.conf.shape
    iou = np.zeros((cells, slots))
    resp = np.zeros((cells, slots))
    best = np.full(cells, -1)
    if target.mode == LEGACY:
        mu = target.occupied[:, 0].astype(float)
        gt_slot = np.zeros((cells, slots), dtype=int)
        for i in np.flatnonzero(mu):
            iou[i] = iou_box_arrays(pboxes[i], gboxes[i, :1])[:, 0]
            best[i] = int(np.argmax(iou[i]))
            resp[i, best[i]] = 1.0
    else:
        mu = target.occupied.astype(float)
        gt_slot = np.tile(np.arange(slots), (cells, 1))
        for i, j in zip(*np.nonzero(target.occupied)):
            iou[i, j] = iou_box_arrays(pboxes[i, j:j + 1], gboxes[i, j:j + 1])[0, 0]
            resp[i, j] = 1.0
        best = np.where(target.occupied.any(1), target.occupied.argmax(1), -1)
    return MatchResult(resp, best, iou, mu, gt_slot)


def _residuals(pred, target: TargetTensor, m: MatchResult, anchors):
    spec = target.spec
    v = pred_view(np.asarray(pred, dtype=float), spec, target.mode, anchors)
    if target.mode == LEGACY:
        gbox = np.repeat(target.box[:, :1], v.conf.shape[1], axis=1)
        gshape = np.repeat(target.shape[:, :1], v.conf.shape[1], axis=1)
        gcls = target.class_onehot()[:, 0]                     # (cells, C)
        cls_res = v.cls - gcls
        cls_w = m.mu                                           # fires once per occupied cell
    else:
        gbox = target.box
        gshape = target.shape
        cls_res = v.cls - target.class_onehot()
        cls_w = m.resp
    return v, v.box - gbox, v.shape - gshape, cls_res, cls_w


def loss_forward(pred: np.ndarray, target: TargetTensor, weights: LossWeights = LossWeights(),
                 anchors: Optional[AnchorSet] = None, matched: Optional[MatchResult] = None,
                 shape_loss: str = "mse") -> LossBreakdown:
    """Weighted sum of the coordinate, confidence, class and shape terms.

    ``shape_loss="bce"`` replaces the squared shape error by binary
    cross-entropy, reading predicted shape values as probabilities.
    """
    anchors = anchors or target.anchors
    _check(pred, target, anchors)
    m = matched if matched is not None else match(pred, target, anchors)
    v, box_res, shape_res, cls_res, cls_w = _residuals(pred, target, m, anchors)
    r = m.resp
    coord = float((r * (box_res ** 2).sum(-1)).sum())
    noobj = float(((1 - r) * v.conf ** 2).sum())
    obj = float((r * (v.conf - m.iou) ** 2).sum())
    cls_sq = (cls_res ** 2).sum(-1)
    cls_term = float((cls_w * cls_sq).sum())
    if shape_loss == "bce":
        gshape = v.shape - shape_res
        per = np.array([bce(v.shape[i, j], gshape[i, j])[0] if r[i, j] else 0.0
                        for i in range(r.shape[0]) for j in range(r.shape[1])])
        shape = float(per.sum())
    elif shape_loss == "mse":
        shape = float((r * (shape_res ** 2).sum(-1)).sum())
    else:
        raise ValueError(f"unknown shape loss {shape_loss!r}")
    total = (weights.coord * coord + weights.noobj * noobj + weights.obj * obj
             + weights.cls * cls_term + weights.shape * shape)
    return LossBreakdown(coord, noobj, obj, cls_term, shape, float(total))


def loss_backward(pred: np.ndarray, target: TargetTensor, weights: LossWeights = LossWeights(),
                  anchors: Optional[AnchorSet] = None, matched: Optional[MatchResult] = None,
                  shape_loss: str = "mse") -> np.ndarray:
    """Gradient of the total loss w.r.t. the flat prediction vector."""
    anchors = anchors or target.anchors
    _check(pred, target, anchors)
    m = matched if matched is not None else match(pred, target, anchors)
    v, box_res, shape_res, cls_res, cls_w = _residuals(pred, target, m, anchors)
    r = m.resp
    grad = np.zeros(layout_size(target.spec, target.mode, anchors))
    g = pred_view(grad, target.spec, target.mode, anchors)
    g.box[...] = 2 * weights.coord * r[..., None] * box_res
    g.conf[...] = (2 * weights.noobj * (1 - r) * v.conf
                   + 2 * weights.obj * r * (v.conf - m.iou))
    g.cls[...] = 2 * weights.cls * cls_w[..., None] * cls_res
    if shape_loss == "bce":
        gshape = v.shape - shape_res
        for i, j in zip(*np.nonzero(r)):
            g.shape[i, j] = weights.shape * bce(v.shape[i, j], gshape[i, j])[1]
    else:
        g.shape[...] = 2 * weights.shape * r[..., None] * shape_res
    return grad


def bce(pred_pixels, target_pixels) -> tuple[float, np.ndarray]:
    """Summed per-pixel binary cross-entropy and its gradient w.r.t. ``pred_pixels``."""
    p = np.clip(np.asarray(pred_pixels, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target_pixels, dtype=np.float64)
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum()
    grad = (p - t) / (p * (1 - p))
    return float(loss), grad
