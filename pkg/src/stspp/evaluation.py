"""Ranked labelling, 11-point AP, mAP sweeps and the five-type detection error taxonomy."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Annotation, Detection, iou_box_arrays, iou_mask_matrix

VOL_THRESHOLDS = tuple(round(0.1 * k, 2) for k in range(1, 10))
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_LEVELS = tuple(k / 10 for k in range(11))

VOC_CLASSES = ("aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair",
               "cow", "diningtable", "dog", "horse", "motorbike", "person", "pottedplant",
               "sheep", "sofa", "train", "tvmonitor")
VOC_SIMILARITY_GROUPS = {
    "vehicles": ["aeroplane", "bicycle", "boat", "bus", "car", "motorbike", "train"],
    "animals": ["bird", "cat", "cow", "dog", "horse", "sheep", "person"],
    "furniture": ["chair", "diningtable", "sofa"],
    "other": ["bottle", "pottedplant", "tvmonitor"],
}

TAXONOMY_TYPES = ("Corr", "Loc", "Sim", "Dissim", "Backgr")
FP_TYPES = TAXONOMY_TYPES[1:]


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = VOL_THRESHOLDS
    criterion: str = "mask"
    jobs: int = 1

    def __post_init__(self):
        if any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if self.criterion not in ("box", "mask"):
            raise ValueError(f"unknown criterion {self.criterion!r}")


@dataclass
class ApResult:
    threshold: float
    per_class: dict[int, float]
    mAP: float
    pr: dict[int, list[tuple[float, float]]] = field(default_factory=dict)


# --------------------------------------------------------------------------
# single-class primitives
# --------------------------------------------------------------------------

def label_ranked(iou: np.ndarray, t: float) -> tuple[np.ndarray, int]:
    """Greedy labelling of ranked predictions (rows) against ground truths (columns).

    Each prediction takes the remaining ground truth of highest IoU (lowest
    index on ties); it is a true positive, consuming that ground truth, when
    the IoU reaches ``t``.  Returns TP flags and the false-negative count.
    """
    iou = np.asarray(iou, dtype=float)
    if iou.ndim != 2:
        iou = iou.reshape(len(iou), -1) if len(iou) else np.zeros((0, 0))
    n, m = iou.shape
    remaining = np.ones(m, dtype=bool)
    tp = np.zeros(n, dtype=bool)
    for i in range(n):
        if not remaining.any():
            continue
        cand = np.where(remaining, iou[i], -np.inf)
        j = int(np.argmax(cand))
        if cand[j] >= t:
            tp[i] = True
            remaining[j] = False
    return tp, int(remaining.sum())


def label_predictions(gts: Sequence, preds: Sequence[Detection], t: float,
                      criterion: str = "box") -> tuple[np.ndarray, int]:
    """``preds`` must already be ranked by confidence (descending)."""
    return label_ranked(_iou_matrix(preds, gts, criterion), t)


def precision_recall(tp: Sequence[bool], gt_count: int) -> list[tuple[float, float]]:
    tp = np.asarray(tp, dtype=bool)
    if gt_count <= 0 or tp.size == 0:
        return []
    cum = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1)
    return list(zip((cum / ranks).tolist(), (cum / gt_count).tolist()))


def ap_11point(tp: Sequence[bool], gt_count: int) -> float:
    """Mean, over recall levels 0, 0.1, ..., 1, of precision at the first rank reaching that recall.

    Unreachable levels contribute 0; no ground truth gives 0.
    """
    tp = np.asarray(tp, dtype=bool)
    if gt_count <= 0 or tp.size == 0:
        return 0.0
    cum = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1)
    total = 0.0
    for k in range(11):
        # recall_i >= k/10  <=>  10 * TP_i >= k * |G|  (exact integer test)
        reached = np.flatnonzero(10 * cum >= k * gt_count)
        if reached.size:
            i = reached[0]
            total += cum[i] / ranks[i]
    return total / 11


# --------------------------------------------------------------------------
# dataset-level evaluation
# --------------------------------------------------------------------------

def _box_array(items) -> np.ndarray:
    return np.array([it.bbox.to_list() for it in items], dtype=float).reshape(-1, 4)


def _iou_matrix(preds: Sequence, gts: Sequence, criterion: str) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    if criterion == "mask":
        if any(getattr(p, "mask", None) is None for p in preds):
            raise ValueError("mask criterion requires detections with masks")
        return iou_mask_matrix([p.mask for p in preds], [g.mask for g in gts])
    return iou_box_arrays(_box_array(preds), _box_array(gts))


def _ranked(detections: Mapping[int, Sequence[Detection]]) -> list[tuple[int, int, Detection]]:
    """All detections as (image_id, input position, det), ranked by confidence, ties by input order."""
    flat = []
    for image_id, dets in detections.items():
        for d in dets:
            flat.append((image_id, len(flat), d))
    flat.sort(key=lambda r: (-r[2].confidence, r[1]))
    return flat


class _ClassCache:
    """Per-image IoU matrices for one class, reused across thresholds."""

    def __init__(self, cls: int, gts: Mapping[int, Sequence[Annotation]],
                 ranked: list[tuple[int, int, Detection]], criterion: str):
        self.ranked = [r for r in ranked if r[2].class_id == cls]
        self.gt_count = 0
        self.by_image: dict[int, tuple[list[int], np.ndarray]] = {}
        per_image: dict[int, list[int]] = {}
        for pos, (image_id, _, _) in enumerate(self.ranked):
            per_image.setdefault(image_id, []).append(pos)
        self._gts = {i: [g for g in anns if g.class_id == cls] for i, anns in gts.items()}
        self.gt_count = sum(len(v) for v in self._gts.values())
        self._per_image = per_image
        self._criterion = criterion

    def compute(self, image_id: int) -> tuple[int, tuple[list[int], np.ndarray]]:
        positions = self._per_image[image_id]
        preds = [self.ranked[p][2] for p in positions]
        return image_id, (positions, _iou_matrix(preds, self._gts.get(image_id, []), self._criterion))

    def fill(self, jobs: int = 1) -> "_ClassCache":
        ids = list(self._per_image)
        if jobs > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(self.compute, ids))
        else:
            results = [self.compute(i) for i in ids]
        self.by_image = dict(results)
        return self

    def labels(self, t: float) -> np.ndarray:
        tp = np.zeros(len(self.ranked), dtype=bool)
        for positions, iou in self.by_image.values():
            if iou.shape[1]:
                flags, _ = label_ranked(iou, t)
                tp[positions] = flags
        return tp


def _caches(gts, detections, cfg: EvalConfig, classes: Optional[Sequence[int]] = None):
    ranked = _ranked(detections)
    if classes is None:
        classes = sorted({g.class_id for anns in gts.values() for g in anns})
    return {c: _ClassCache(c, gts, ranked, cfg.criterion).fill(cfg.jobs) for c in classes}


def _map_from_caches(caches: dict[int, _ClassCache], t: float) -> ApResult:
    per_class, pr = {}, {}
    for c, cache in caches.items():
        tp = cache.labels(t)
        per_class[c] = ap_11point(tp, cache.gt_count)
        pr[c] = precision_recall(tp, cache.gt_count)
    evaluated = [ap for c, ap in per_class.items() if caches[c].gt_count > 0]
    mean = float(np.mean(evaluated)) if evaluated else 0.0
    return ApResult(t, per_class, mean, pr)


def map_at(gts: Mapping[int, Sequence[Annotation]], detections: Mapping[int, Sequence[Detection]],
           t: float, cfg: EvalConfig = EvalConfig(), classes: Optional[Sequence[int]] = None) -> ApResult:
    """mAP at IoU threshold ``t``; mean over classes that have ground truth."""
    return _map_from_caches(_caches(gts, detections, cfg, classes), t)


def map_sweep(gts, detections, thresholds: Sequence[float], cfg: EvalConfig = EvalConfig(),
              classes=None) -> list[ApResult]:
    caches = _caches(gts, detections, cfg, classes)
    return [_map_from_caches(caches, t) for t in thresholds]


def map_vol(gts, detections, cfg: EvalConfig = EvalConfig(), classes=None) -> float:
    return float(np.mean([r.mAP for r in map_sweep(gts, detections, VOL_THRESHOLDS, cfg, classes)]))


def map_coco(gts, detections, cfg: EvalConfig = EvalConfig(), classes=None) -> float:
    return float(np.mean([r.mAP for r in map_sweep(gts, detections, COCO_THRESHOLDS, cfg, classes)]))


# --------------------------------------------------------------------------
# error taxonomy
# --------------------------------------------------------------------------

@dataclass
class ErrorBreakdown:
    counts: dict[str, int]
    fractions: dict[str, float]
    fp_shares: dict[str, float]
    labels: list[tuple[int, int, str]] = field(default_factory=list)  # (image_id, class_id, type)

    def to_dict(self) -> dict:
        return {"counts": self.counts, "fractions": self.fractions, "fp_shares": self.fp_shares}


def groups_from_names(groups: Mapping[str, Sequence[str]], class_names: Sequence[str]) -> dict[str, list[int]]:
    index = {n: i for i, n in enumerate(class_names)}
    try:
        return {g: [index[n] for n in names] for g, names in groups.items()}
    except KeyError as exc:
        raise ValueError(f"unknown class name {exc.args[0]!r} in similarity groups") from exc


def error_taxonomy(gts: Mapping[int, Sequence[Annotation]], detections: Mapping[int, Sequence[Detection]],
                   similarity_groups: Mapping[str, Sequence[int]], top_k: Optional[Mapping[int, int]] = None,
                   criterion: str = "box", corr_iou: float = 0.5, loc_iou: float = 0.1) -> ErrorBreakdown:
    """Classify the top-ranked detections of each class as Corr/Loc/Sim/Dissim/Backgr.

    By default the top ``N_c`` detections of class ``c`` are analysed, where
    ``N_c`` is its ground-truth count.  Duplicate detections of an already
    matched object count as localisation errors.
    """
    group_of: dict[int, str] = {}
    for g, members in similarity_groups.items():
        for c in members:
            group_of[int(c)] = g
    for anns in gts.values():
        for a in anns:
            if a.class_id not in group_of:
                raise ValueError(f"class id {a.class_id} is not in any similarity group")
    for dets in detections.values():
        for d in dets:
            if d.class_id not in group_of:
                raise ValueError(f"class id {d.class_id} is not in any similarity group")

    gt_counts: dict[int, int] = {}
    for anns in gts.values():
        for a in anns:
            gt_counts[a.class_id] = gt_counts.get(a.class_id, 0) + 1

    ranked = _ranked(detections)
    counts = {k: 0 for k in TAXONOMY_TYPES}
    labels = []
    for cls in sorted(group_of):
        dets = [r for r in ranked if r[2].class_id == cls]
        k = (top_k or gt_counts).get(cls, 0)
        consumed: dict[int, np.ndarray] = {}
        for image_id, _, d in dets[:k]:
            anns = list(gts.get(image_id, []))
            iou = _iou_matrix([d], anns, criterion)[0] if anns else np.zeros(0)
            same = np.array([a.class_id == cls for a in anns], dtype=bool)
            sim = np.array([a.class_id != cls and group_of[a.class_id] == group_of[cls] for a in anns],
                           dtype=bool)
            other = ~same & ~sim
            used = consumed.setdefault(image_id, np.zeros(len(anns), dtype=bool))
            free = same & ~used
            kind = "Backgr"
            if free.any() and iou[free].max() >= corr_iou:
                j = int(np.flatnonzero(free)[np.argmax(iou[free])])
                used[j] = True
                kind = "Corr"
            elif same.any() and iou[same].max() >= loc_iou:
                kind = "Loc"
            elif sim.any() and iou[sim].max() >= loc_iou:
                kind = "Sim"
            elif other.any() and iou[other].max() >= loc_iou:
                kind = "Dissim"
            counts[kind] += 1
            labels.append((image_id, cls, kind))
    total = sum(counts.values())
    fractions = {k: (counts[k] / total if total else 0.0) for k in TAXONOMY_TYPES}
    fp_total = sum(counts[k] for k in FP_TYPES)
    fp_shares = {k: (100.0 * counts[k] / fp_total if fp_total else 0.0) for k in FP_TYPES}
    return ErrorBreakdown(counts, fractions, fp_shares, labels)
