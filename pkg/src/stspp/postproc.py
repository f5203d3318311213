"""Proposals to final detections: scoring, shape decoding, greedy NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection, iou_box, iou_mask, paste_mask
from .targets import Proposal


@dataclass(frozen=True)
class PostprocConfig:
    confidence_threshold: float = 0.005
    nms_iou_threshold: float = 0.5
    nms_criterion: str = "box"

    def __post_init__(self):
        for name in ("confidence_threshold", "nms_iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.nms_criterion not in ("box", "mask"):
            raise ValueError(f"unknown nms criterion {self.nms_criterion!r}")


def proposal_score(p: Proposal) -> tuple[int, float]:
    """(class, confidence x class score), both factors clipped to [0, 1]."""
    k = int(np.argmax(p.class_scores))
    score = float(np.clip(p.confidence, 0, 1) * np.clip(p.class_scores[k], 0, 1))
    return k, score


def _box_from_proposal(p: Proposal) -> Optional[BoundingBox]:
    cx, cy, w, h = p.box
    if not (w > 0 and h > 0) or not np.isfinite([cx, cy, w, h]).all():
        return None
    return BoundingBox(float(np.clip(cx, 0, 1)), float(np.clip(cy, 0, 1)), w, h)


def decode_detections(proposals: Sequence[Proposal], codec, cfg: PostprocConfig,
                      image_w: int, image_h: int) -> list[Detection]:
    """Score, threshold and (when ``codec`` is given) attach pasted masks."""
    out = []
    for p in proposals:
        k, score = proposal_score(p)
        if score < cfg.confidence_threshold:
            continue
        box = _box_from_proposal(p)
        if box is None:
            continue
        mask = None
        if codec is not None:
            mask = paste_mask(codec.decode(p.shape_code, codec.mask_side), box, image_w, image_h)
        out.append(Detection(k, score, box, mask))
    return out


def _pair_iou(a: Detection, b: Detection, criterion: str) -> float:
    if criterion == "mask":
        if a.mask is None or b.mask is None:
            raise ValueError("mask NMS requires detections with masks")
        return iou_mask(a.mask, b.mask)
    return iou_box(a.bbox, b.bbox)


def nms(detections: Sequence[Detection], cfg: PostprocConfig = PostprocConfig()) -> list[Detection]:
    """Greedy per-class suppression; output sorted by score, ties by input order."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(k.class_id != d.class_id
               or _pair_iou(k, d, cfg.nms_criterion) <= cfg.nms_iou_threshold for k in kept):
            kept.append(d)
    return kept


def postprocess(proposals: Sequence[Proposal], codec, cfg: PostprocConfig,
                image_w: int, image_h: int) -> list[Detection]:
    """Decode then suppress.  Under box NMS masks are decoded for survivors only."""
    if cfg.nms_criterion == "mask" or codec is None:
        return nms(decode_detections(proposals, codec, cfg, image_w, image_h), cfg)
    pairs = []
    for p in proposals:
        det = decode_detections([p], None, cfg, image_w, image_h)
        if det:
            pairs.append((det[0], p))
    source = {id(d): p for d, p in pairs}
    kept = nms([d for d, _ in pairs], cfg)
    for d in kept:
        d.mask = paste_mask(codec.decode(source[id(d)].shape_code, codec.mask_side), d.bbox,
                            image_w, image_h)
    return kept
