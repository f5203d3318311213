"""Grid / anchor target encoding and prediction-tensor unpacking.

Two layouts are supported for the flat prediction vector, cell-major
(cell ``i = row * S + col``):

* ``legacy``: per cell ``[p_1..p_C, B x (c, x, y, psi, omega, s_1..s_M)]``
* ``anchor``: per cell, per anchor ``[c, x, y, psi, omega, p_1..p_C, s_1..s_M]``

``psi``/``omega`` are square roots of the box height/width; ``x``/``y`` are
relative to the owning cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Annotation, BoundingBox, crop_resize_mask

LEGACY = "legacy"
ANCHOR = "anchor"
MODES = (LEGACY, ANCHOR)


@dataclass(frozen=True)
class GridSpec:
    S: int = 7
    B: int = 2
    C: int = 20
    M: int = 20

    def __post_init__(self):
        if self.S < 1 or self.B < 1 or self.C < 1 or self.M < 0:
            raise ValueError(f"invalid grid spec {self}")


@dataclass(frozen=True)
class AnchorSet:
    aspect_ratios: tuple[tuple[float, float], ...] = ((1, 1), (1, 2), (2, 1))

    def __post_init__(self):
        if not self.aspect_ratios:
            raise ValueError("anchor set must be nonempty")
        if any(a <= 0 or b <= 0 for a, b in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")

    def __len__(self):
        return len(self.aspect_ratios)

    def unit_shapes(self) -> np.ndarray:
        """(A, 2) array of unit-area (w, h) per anchor."""
        r = np.array([a / b for a, b in self.aspect_ratios], dtype=float)
        return np.stack([np.sqrt(r), 1 / np.sqrt(r)], axis=1)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown layout mode {mode!r}")


def slots_per_cell(spec: GridSpec, mode: str, anchors: Optional[AnchorSet] = None) -> int:
    _check_mode(mode)
    return spec.B if mode == LEGACY else len(anchors or AnchorSet())


def cell_channels(spec: GridSpec, mode: str, anchors: Optional[AnchorSet] = None) -> int:
    """Length of one cell's block of the prediction vector."""
    _check_mode(mode)
    if mode == LEGACY:
        return spec.C + spec.B * (5 + spec.M)
    return len(anchors or AnchorSet()) * (5 + spec.C + spec.M)


def layout_size(spec: GridSpec, mode: str, anchors: Optional[AnchorSet] = None) -> int:
    return spec.S * spec.S * cell_channels(spec, mode, anchors)


@dataclass
class PredView:
    """Writable views into a flat prediction (or gradient) vector.

    ``conf``/``box``/``shape`` are indexed ``[cell, slot]``; ``cls`` is
    ``[cell, C]`` in legacy mode (shared by the B proposals) and
    ``[cell, slot, C]`` in anchor mode.
    """

    conf: np.ndarray
    box: np.ndarray
    cls: np.ndarray
    shape: np.ndarray


def pred_view(pred: np.ndarray, spec: GridSpec, mode: str,
              anchors: Optional[AnchorSet] = None) -> PredView:
    pred = np.asarray(pred)
    n = layout_size(spec, mode, anchors)
    if pred.ndim != 1 or pred.size != n:
        raise ValueError(f"prediction length {pred.size} does not match layout size {n}")
    cells = spec.S * spec.S
    block = pred.reshape(cells, cell_channels(spec, mode, anchors))
    if mode == LEGACY:
        cls = block[:, : spec.C]
        boxes = block[:, spec.C:].reshape(cells, spec.B, 5 + spec.M)
        return PredView(boxes[..., 0], boxes[..., 1:5], cls, boxes[..., 5:])
    A = len(anchors or AnchorSet())
    slots = block.reshape(cells, A, 5 + spec.C + spec.M)
    return PredView(slots[..., 0], slots[..., 1:5], slots[..., 5:5 + spec.C], slots[..., 5 + spec.C:])


@dataclass
class TargetTensor:
    """Ground truth packed on the grid.

    ``occupied`` is ``[cell, slot]`` with one slot per cell in legacy mode
    and one per anchor in anchor mode.  ``box`` stores cell-relative
    ``(x, y, psi, omega)``.
    """

    mode: str
    spec: GridSpec
    occupied: np.ndarray
    class_id: np.ndarray
    box: np.ndarray
    shape: np.ndarray
    anchors: Optional[AnchorSet] = None

    @property
    def n_slots(self) -> int:
        return self.occupied.shape[1]

    def class_onehot(self) -> np.ndarray:
        out = np.zeros(self.occupied.shape + (self.spec.C,))
        idx = np.nonzero(self.occupied)
        out[idx + (self.class_id[idx],)] = 1.0
        return out

    def image_boxes(self) -> np.ndarray:
        """(cells, slots, 4) image-space (cx, cy, w, h) of encoded boxes."""
        return cell_to_image(self.box, self.spec.S)

    def to_dict(self) -> dict:
        """Header plus flat per-slot records ``[mu, x, y, psi, omega, p_1..C, s_1..M]``."""
        rec = np.concatenate([self.occupied[..., None].astype(float), self.box,
                              self.class_onehot(), self.shape], axis=-1)
        return {"header": {"S": self.spec.S, "B_or_A": self.n_slots if self.mode == ANCHOR else self.spec.B,
                           "C": self.spec.C, "M": self.spec.M, "mode": self.mode},
                "data": rec.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TargetTensor":
        hd = doc["header"]
        mode = hd["mode"]
        _check_mode(mode)
        spec = GridSpec(hd["S"], hd["B_or_A"] if mode == LEGACY else 1, hd["C"], hd["M"])
        anchors = AnchorSet() if mode == ANCHOR else None
        if mode == ANCHOR and hd["B_or_A"] != len(anchors):
            raise ValueError("only the default 3-anchor set can be restored from a header")
        slots = 1 if mode == LEGACY else hd["B_or_A"]
        width = 5 + spec.C + spec.M
        rec = np.asarray(doc["data"], dtype=float)
        if rec.size != spec.S ** 2 * slots * width:
            raise ValueError("target data length does not match header")
        rec = rec.reshape(spec.S ** 2, slots, width)
        occ = rec[..., 0] > 0.5
        cid = np.where(occ, rec[..., 5:5 + spec.C].argmax(-1), -1)
        return cls(mode, spec, occ, cid, rec[..., 1:5].copy(), rec[..., 5 + spec.C:].copy(), anchors)


def empty_target(spec: GridSpec, mode: str, anchors: Optional[AnchorSet] = None) -> TargetTensor:
    _check_mode(mode)
    slots = 1 if mode == LEGACY else len(anchors or AnchorSet())
    cells = spec.S * spec.S
    return TargetTensor(mode, spec, np.zeros((cells, slots), dtype=bool),
                        np.full((cells, slots), -1, dtype=int), np.zeros((cells, slots, 4)),
                        np.zeros((cells, slots, spec.M)),
                        (anchors or AnchorSet()) if mode == ANCHOR else None)


def cell_of(box: BoundingBox, S: int) -> tuple[int, int]:
    """(row, col) of the cell containing the box center."""
    col = min(int(math.floor(box.cx * S)), S - 1)
    row = min(int(math.floor(box.cy * S)), S - 1)
    return row, col


def cell_to_image(cellbox: np.ndarray, S: int) -> np.ndarray:
    """Map ``[..., (x, y, psi, omega)]`` of cells laid out cell-major to image (cx, cy, w, h)."""
    cellbox = np.asarray(cellbox, dtype=float)
    cells = cellbox.shape[0]
    idx = np.arange(cells)
    rows, cols = idx // S, idx % S
    shape = (cells,) + (1,) * (cellbox.ndim - 2)
    cx = (cols.reshape(shape) + cellbox[..., 0]) / S
    cy = (rows.reshape(shape) + cellbox[..., 1]) / S
    w = np.clip(cellbox[..., 3], 0, None) ** 2
    h = np.clip(cellbox[..., 2], 0, None) ** 2
    return np.stack([cx, cy, w, h], axis=-1)


def _slot_record(ann: Annotation, S: int, codec) -> tuple[int, np.ndarray, np.ndarray]:
    row, col = cell_of(ann.bbox, S)
    x = ann.bbox.cx * S - col
    y = ann.bbox.cy * S - row
    box = np.array([min(x, np.nextafter(1, 0)), min(y, np.nextafter(1, 0)),
                    math.sqrt(ann.bbox.h), math.sqrt(ann.bbox.w)])
    if codec is None or codec.code_length == 0:
        code = np.zeros(0)
    else:
        code = codec.encode(crop_resize_mask(ann.mask, ann.bbox, codec.mask_side))
    return row * S + col, box, code


def _by_area(annotations: Sequence[Annotation]) -> list[Annotation]:
    # larger boxes first; stable for equal areas
    return sorted(annotations, key=lambda a: -a.bbox.area)


def encode_legacy(annotations: Sequence[Annotation], spec: GridSpec, codec=None) -> TargetTensor:
    """One object per cell; on collision the larger box is kept."""
    _check_code_length(spec, codec)
    tgt = empty_target(spec, LEGACY)
    for ann in _by_area(annotations):
        cell, box, code = _slot_record(ann, spec.S, codec)
        if tgt.occupied[cell, 0]:
            continue
        _fill(tgt, cell, 0, ann.class_id, box, code, spec)
    return tgt


def anchor_match(box: BoundingBox, anchors: Optional[AnchorSet] = None) -> int:
    """Index of the anchor whose co-centered unit-area shape best overlaps the box's shape."""
    shapes = (anchors or AnchorSet()).unit_shapes()
    scale = math.sqrt(box.w * box.h)
    gw, gh = box.w / scale, box.h / scale
    inter = np.minimum(shapes[:, 0], gw) * np.minimum(shapes[:, 1], gh)
    iou = inter / (1.0 + 1.0 - inter)
    return int(np.argmax(iou))


def encode_anchored(annotations: Sequence[Annotation], spec: GridSpec,
                    anchors: Optional[AnchorSet] = None, codec=None) -> TargetTensor:
    """Each object goes to (center cell, best anchor); slot collisions keep the larger box."""
    _check_code_length(spec, codec)
    anchors = anchors or AnchorSet()
    tgt = empty_target(spec, ANCHOR, anchors)
    for ann in _by_area(annotations):
        a = anchor_match(ann.bbox, anchors)
        cell, box, code = _slot_record(ann, spec.S, codec)
        if tgt.occupied[cell, a]:
            continue
        _fill(tgt, cell, a, ann.class_id, box, code, spec)
    return tgt


def encode(annotations, spec: GridSpec, mode: str, anchors: Optional[AnchorSet] = None,
           codec=None) -> TargetTensor:
    _check_mode(mode)
    if mode == LEGACY:
        return encode_legacy(annotations, spec, codec)
    return encode_anchored(annotations, spec, anchors, codec)


def _check_code_length(spec: GridSpec, codec) -> None:
    m = 0 if codec is None else codec.code_length
    if m != spec.M:
        raise ValueError(f"codec code length {m} does not match grid spec M={spec.M}")


def _fill(tgt: TargetTensor, cell: int, slot: int, class_id: int, box, code, spec: GridSpec) -> None:
    if not 0 <= class_id < spec.C:
        raise ValueError(f"class id {class_id} outside [0, {spec.C})")
    tgt.occupied[cell, slot] = True
    tgt.class_id[cell, slot] = class_id
    tgt.box[cell, slot] = box
    tgt.shape[cell, slot] = code


def target_to_prediction(tgt: TargetTensor) -> np.ndarray:
    """A prediction vector that reproduces ``tgt`` exactly (confidence 1 on occupied slots)."""
    spec = tgt.spec
    pred = np.zeros(layout_size(spec, tgt.mode, tgt.anchors))
    v = pred_view(pred, spec, tgt.mode, tgt.anchors)
    onehot = tgt.class_onehot()
    if tgt.mode == LEGACY:
        occ = tgt.occupied[:, 0]
        v.conf[occ, 0] = 1.0
        v.box[occ, 0] = tgt.box[occ, 0]
        v.shape[occ, 0] = tgt.shape[occ, 0]
        v.cls[occ] = onehot[occ, 0]
    else:
        occ = tgt.occupied
        v.conf[occ] = 1.0
        v.box[occ] = tgt.box[occ]
        v.shape[occ] = tgt.shape[occ]
        v.cls[occ] = onehot[occ]
    return pred


@dataclass
class Proposal:
    cell: int
    slot: int
    confidence: float
    box: tuple[float, float, float, float]  # image-space (cx, cy, w, h); w/h may be 0
    class_scores: np.ndarray = field(repr=False)
    shape_code: np.ndarray = field(repr=False)


def unpack_predictions(pred: np.ndarray, spec: GridSpec, mode: str,
                       anchors: Optional[AnchorSet] = None) -> list[Proposal]:
    v = pred_view(np.asarray(pred, dtype=float), spec, mode, anchors)
    boxes = cell_to_image(v.box, spec.S)
    out = []
    for cell in range(spec.S * spec.S):
        for slot in range(v.conf.shape[1]):
            scores = v.cls[cell] if mode == LEGACY else v.cls[cell, slot]
            out.append(Proposal(cell, slot, float(v.conf[cell, slot]),
                                tuple(float(b) for b in boxes[cell, slot]),
                                np.array(scores), np.array(v.shape[cell, slot])))
    return out


def prediction_to_dict(pred: np.ndarray, spec: GridSpec, mode: str,
                       anchors: Optional[AnchorSet] = None) -> dict:
    slots = slots_per_cell(spec, mode, anchors)
    pred = np.asarray(pred, dtype=float)
    if pred.size != layout_size(spec, mode, anchors):
        raise ValueError("prediction length does not match layout")
    return {"header": {"S": spec.S, "B_or_A": slots, "C": spec.C, "M": spec.M, "mode": mode},
            "data": pred.tolist()}


def prediction_from_dict(doc: dict) -> tuple[np.ndarray, GridSpec, str]:
    hd = doc["header"]
    mode = hd["mode"]
    _check_mode(mode)
    spec = GridSpec(hd["S"], hd["B_or_A"] if mode == LEGACY else 1, hd["C"], hd["M"])
    if mode == ANCHOR and hd["B_or_A"] != 3:
        raise ValueError("only the default 3-anchor set can be restored from a header")
    pred = np.asarray(doc["data"], dtype=float)
    if pred.size != layout_size(spec, mode):
        raise ValueError("prediction data length does not match header")
    return pred, spec, mode
