import numpy as np
import pytest

from stspp.core import Annotation, BoundingBox, Detection, box_mask
from stspp.evaluation import (COCO_THRESHOLDS, FP_TYPES, TAXONOMY_TYPES, VOC_CLASSES, VOC_SIMILARITY_GROUPS,
                              VOL_THRESHOLDS, EvalConfig, ap_11point, error_taxonomy, groups_from_names,
                              label_predictions, label_ranked, map_at, map_coco, map_sweep, map_vol)

SIDE = 40


def ann(cls, cx, cy, w, h):
    return Annotation.from_mask(cls, box_mask(BoundingBox(cx, cy, w, h), SIDE, SIDE))


def as_det(a, conf, cls=None):
    return Detection(a.class_id if cls is None else cls, conf, a.bbox, a.mask.copy())


# ---- independent oracles -------------------------------------------------

def oracle_labels(iou, t):
    n = len(iou)
    m = len(iou[0]) if n else 0
    taken = [False] * m
    out = []
    for i in range(n):
        best, bj = None, None
        for j in range(m):
            if not taken[j] and (best is None or iou[i][j] > best):
                best, bj = iou[i][j], j
        if best is not None and best >= t:
            taken[bj] = True
            out.append(True)
        else:
            out.append(False)
    return out, taken.count(False)


def oracle_ap(tp, g):
    if g == 0:
        return 0.0
    total = 0.0
    for k in range(11):
        hits = 0
        for i, flag in enumerate(tp, 1):
            hits += flag
            if hits / g >= k / 10 - 1e-12:
                total += hits / i
                break
    return total / 11


def oracle_map(gts, dets, t):
    classes = sorted({a.class_id for v in gts.values() for a in v})
    aps = []
    for c in classes:
        flat = [(d.confidence, -n, img, d) for n, (img, d) in
                enumerate((img, d) for img, ds in dets.items() for d in ds) if d.class_id == c]
        flat.sort(key=lambda r: (-r[0], -r[1]))
        taken = {img: [False] * len(v) for img, v in gts.items()}
        tp = []
        for _, _, img, d in flat:
            best, bj = -1.0, None
            for j, g in enumerate(gts.get(img, [])):
                if g.class_id != c or taken[img][j]:
                    continue
                inter = (d.mask & g.mask).sum()
                union = (d.mask | g.mask).sum()
                v = inter / union if union else 1.0
                if v > best:
                    best, bj = v, j
            ok = bj is not None and best >= t
            if ok:
                taken[img][bj] = True
            tp.append(ok)
        g = sum(a.class_id == c for v in gts.values() for a in v)
        aps.append(oracle_ap(tp, g))
    return float(np.mean(aps)) if aps else 0.0


def random_scene(rng, n_img=1, max_gt=5, max_det=8, classes=3):
    gts, dets = {}, {}
    for i in range(n_img):
        gts[i] = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            w, h = rng.uniform(0.1, 0.5, 2)
            gts[i].append(ann(int(rng.integers(classes)), *rng.uniform(0.25, 0.75, 2), w, h))
        dets[i] = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            if gts[i] and rng.random() < 0.6:
                g = gts[i][int(rng.integers(len(gts[i])))]
                j = rng.normal(0, 0.04, 4)
                b = BoundingBox(float(np.clip(g.bbox.cx + j[0], 0, 1)), float(np.clip(g.bbox.cy + j[1], 0, 1)),
                                max(0.05, g.bbox.w + j[2]), max(0.05, g.bbox.h + j[3]))
                cls = g.class_id if rng.random() < 0.8 else int(rng.integers(classes))
            else:
                b = BoundingBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))
                cls = int(rng.integers(classes))
            m = box_mask(b, SIDE, SIDE)
            if not m.any():
                continue
            dets[i].append(Detection(cls, float(rng.choice([0.3, 0.6, rng.random()])), b, m))
    return gts, dets


# ---- tests ---------------------------------------------------------------

def test_label_examples():
    g = [ann(0, 0.3, 0.3, 0.2, 0.2), ann(0, 0.7, 0.7, 0.2, 0.2)]
    tp, fn = label_predictions(g, [as_det(g[0], 0.9), as_det(g[1], 0.8)], 0.5)
    assert tp.tolist() == [True, True] and fn == 0
    tp, fn = label_predictions(g, [as_det(g[0], 0.9), as_det(g[0], 0.8)], 0.5)
    assert tp.tolist() == [True, False] and fn == 1


def test_label_oracle(rng):
    for _ in range(200):
        iou = rng.choice([0.0, 0.3, 0.5, 0.7, 1.0], size=(int(rng.integers(0, 5)), 3))
        tp, fn = label_ranked(iou, 0.5)
        otp, ofn = oracle_labels(iou.tolist(), 0.5)
        assert tp.tolist() == otp and fn == (ofn if len(iou) else 3)


def test_ap_examples():
    assert ap_11point([True, True], 2) == 1.0
    assert ap_11point([False, False], 2) == 0.0
    assert ap_11point([], 0) == 0.0
    # [TP, FP, TP], 2 gts: recall 0..0.5 at rank 1 (p=1); 0.6..1.0 at rank 3 (p=2/3)
    assert ap_11point([True, False, True], 2) == pytest.approx((6 * 1 + 5 * 2 / 3) / 11)


def test_ap_oracle_and_monotonicity(rng):
    for _ in range(200):
        tp = (rng.random(int(rng.integers(0, 9))) < 0.5).tolist()
        g = sum(tp) + int(rng.integers(0, 3))
        assert ap_11point(tp, g) == pytest.approx(oracle_ap(tp, g), abs=1e-12)
        assert ap_11point(tp + [False], g) <= ap_11point(tp, g) + 1e-12
        if sum(tp) < g:
            assert ap_11point(tp + [True], g) >= ap_11point(tp, g) - 1e-12


def test_map_oracle_random_scenes(rng):
    for _ in range(200):
        gts, dets = random_scene(rng)
        for t in (0.3, 0.5, 0.7):
            assert map_at(gts, dets, t, EvalConfig(criterion="mask")).mAP == pytest.approx(
                oracle_map(gts, dets, t), abs=1e-12)


def test_map_vol_five_image_oracle(rng):
    for _ in range(5):
        gts, dets = random_scene(rng, n_img=5)
        expect = np.mean([oracle_map(gts, dets, t) for t in VOL_THRESHOLDS])
        assert map_vol(gts, dets, EvalConfig(criterion="mask")) == pytest.approx(expect, abs=1e-12)


def test_ap_rank_invariance(rng):
    for _ in range(50):
        gts, dets = random_scene(rng, n_img=3)
        scaled = {i: [Detection(d.class_id, d.confidence ** 3 * 0.5, d.bbox, d.mask) for d in v]
                  for i, v in dets.items()}
        cfg = EvalConfig(criterion="mask")
        assert map_at(gts, dets, 0.5, cfg).mAP == map_at(gts, scaled, 0.5, cfg).mAP


def test_perfect_and_threshold_semantics():
    gts = {0: [ann(0, 0.3, 0.3, 0.2, 0.2), ann(1, 0.7, 0.6, 0.3, 0.2)], 1: [ann(2, 0.5, 0.5, 0.5, 0.5)]}
    dets = {i: [as_det(a, 0.9) for a in v] for i, v in gts.items()}
    assert all(r.mAP == 1.0 for r in map_sweep(gts, dets, VOL_THRESHOLDS, EvalConfig(criterion="mask")))
    assert map_vol(gts, dets) == 1.0 and map_coco(gts, dets) == 1.0
    assert len(COCO_THRESHOLDS) == 10
    # mask IoU exactly 0.6: gt 10x10 px, detection covers 6 of its columns
    g = np.zeros((SIDE, SIDE), bool)
    g[10:20, 10:20] = True
    d = np.zeros_like(g)
    d[10:20, 10:16] = True
    gt = {0: [Annotation.from_mask(0, g)]}
    dt = {0: [Detection(0, 0.9, BoundingBox.from_mask(d), d)]}
    cfg = EvalConfig(criterion="mask")
    assert map_at(gt, dt, 0.5, cfg).mAP == 1.0 and map_at(gt, dt, 0.7, cfg).mAP == 0.0


def test_taxonomy_fixtures():
    groups = {"a": [0, 1], "b": [2]}
    g = ann(0, 0.5, 0.5, 0.4, 0.4)
    gts = {0: [g]}
    far = BoundingBox(0.1, 0.1, 0.1, 0.1)
    loc = BoundingBox(0.5, 0.5, 0.4, 0.12)     # IoU 0.3 with g
    cases = {
        "Corr": Detection(0, 0.9, g.bbox),
        "Loc": Detection(0, 0.9, loc),
        "Sim": Detection(1, 0.9, g.bbox),
        "Dissim": Detection(2, 0.9, g.bbox),
        "Backgr": Detection(0, 0.9, far),
    }
    for kind, d in cases.items():
        top = {d.class_id: 1}
        br = error_taxonomy(gts, {0: [d]}, groups, top_k=top)
        assert br.counts[kind] == 1, kind


def test_taxonomy_sums(rng):
    groups = {"a": [0, 1], "b": [2]}
    for _ in range(100):
        gts, dets = random_scene(rng, n_img=3)
        top = {c: 4 for c in range(3)}
        br = error_taxonomy(gts, dets, groups, top_k=top)
        if sum(br.counts.values()):
            assert sum(br.fractions.values()) == pytest.approx(1.0, abs=1e-9)
        if sum(br.counts[k] for k in FP_TYPES):
            assert sum(br.fp_shares.values()) == pytest.approx(100.0, abs=1e-6)
        assert set(br.fractions) == set(TAXONOMY_TYPES)


def test_taxonomy_unknown_class():
    with pytest.raises(ValueError):
        error_taxonomy({0: [ann(5, 0.5, 0.5, 0.2, 0.2)]}, {}, {"a": [0]})


def test_voc_groups():
    groups = groups_from_names(VOC_SIMILARITY_GROUPS, VOC_CLASSES)
    assert sorted(c for v in groups.values() for c in v) == list(range(20))
