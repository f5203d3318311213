import json

import numpy as np
import pytest

from stspp.core import Annotation, BoundingBox, box_mask
from stspp.shapecodec import DtCodec
from stspp.targets import (ANCHOR, LEGACY, AnchorSet, GridSpec, TargetTensor, anchor_match, cell_channels,
                           encode, encode_anchored, encode_legacy, layout_size, prediction_from_dict,
                           prediction_to_dict, target_to_prediction, unpack_predictions)


def box_ann(cls, cx, cy, w, h, side=96):
    b = BoundingBox(cx, cy, w, h)
    return Annotation.from_mask(cls, box_mask(b, side, side))


def test_layout_constants():
    assert layout_size(GridSpec(7, 2, 20, 20), LEGACY) == 3430
    assert cell_channels(GridSpec(7, 2, 20, 20), ANCHOR) == 135
    assert layout_size(GridSpec(1, 1, 1, 0), LEGACY) == 6
    with pytest.raises(ValueError):
        layout_size(GridSpec(), "other")
    with pytest.raises(ValueError):
        GridSpec(0, 1, 1, 1)
    with pytest.raises(ValueError):
        AnchorSet(((1, 0),))


def test_legacy_encode_examples():
    spec = GridSpec(7, 2, 3, 0)
    assert not encode_legacy([], spec).occupied.any()
    t = encode_legacy([box_ann(1, 0.5, 0.5, 0.28, 0.28, side=700)], spec)
    assert np.flatnonzero(t.occupied[:, 0]).tolist() == [3 * 7 + 3]
    assert t.box[24, 0, :2] == pytest.approx([0.5, 0.5])
    pair = [box_ann(0, 0.5, 0.5, 0.2, 0.4, 700), box_ann(1, 0.5, 0.5, 0.4, 0.3, 700)]
    t = encode_legacy(pair, spec)
    assert t.occupied.sum() == 1
    assert t.class_id[24, 0] == 1          # larger box kept


def test_anchor_match_examples():
    assert anchor_match(BoundingBox(0.5, 0.5, 0.2, 0.2)) == 0
    assert anchor_match(BoundingBox(0.5, 0.5, 0.1, 0.2)) == 1
    assert anchor_match(BoundingBox(0.5, 0.5, 0.2, 0.1)) == 2
    # w:h = 1.3 brute force over co-centered unit-area shapes
    w, h = np.sqrt(1.3), 1 / np.sqrt(1.3)
    cands = [(1, 1), (np.sqrt(0.5), np.sqrt(2)), (np.sqrt(2), np.sqrt(0.5))]
    ious = [min(w, a) * min(h, b) / (2 - min(w, a) * min(h, b)) for a, b in cands]
    assert anchor_match(BoundingBox(0.5, 0.5, 0.13, 0.1)) == int(np.argmax(ious))


def test_anchored_encode_examples():
    spec = GridSpec(3, 1, 3, 0)
    assert not encode_anchored([], spec).occupied.any()
    one = encode_anchored([box_ann(2, 0.2, 0.2, 0.1, 0.1)], spec)
    assert one.occupied.sum() == 1
    pair = [box_ann(0, 0.5, 0.5, 0.2, 0.5), box_ann(1, 0.5, 0.5, 0.5, 0.2)]
    t = encode_anchored(pair, spec)
    assert t.occupied.sum() == 2
    assert set(np.nonzero(t.occupied[4])[0]) == {1, 2}
    assert encode_legacy(pair, GridSpec(3, 2, 3, 0)).occupied.sum() == 1


def test_three_ratios_never_collide():
    spec = GridSpec(3, 1, 3, 0)
    anns = [box_ann(0, 0.5, 0.5, 0.3, 0.3), box_ann(1, 0.5, 0.5, 0.2, 0.4), box_ann(2, 0.5, 0.5, 0.4, 0.2)]
    assert encode_anchored(anns, spec).occupied.sum() == 3


@pytest.mark.parametrize("mode", [LEGACY, ANCHOR])
def test_encode_unpack_round_trip(mode):
    codec = DtCodec(8, 4, 16)
    spec = GridSpec(3, 2, 3, codec.code_length)
    anns = [box_ann(0, 0.15, 0.2, 0.2, 0.3), box_ann(2, 0.8, 0.5, 0.3, 0.1), box_ann(1, 0.5, 0.85, 0.1, 0.2)]
    t = encode(anns, spec, mode, codec=codec)
    props = [p for p in unpack_predictions(target_to_prediction(t), spec, mode) if p.confidence == 1.0]
    assert len(props) == 3
    got = sorted((int(np.argmax(p.class_scores)), p.box) for p in props)
    want = sorted((a.class_id, tuple(a.bbox.to_list())) for a in anns)
    for (gc, gb), (wc, wb) in zip(got, want):
        assert gc == wc
        assert gb == pytest.approx(wb, abs=1e-9)


@pytest.mark.parametrize("mode", [LEGACY, ANCHOR])
def test_unpack_zero_and_oracle(mode, rng):
    spec = GridSpec(2, 2, 3, 4)
    n = layout_size(spec, mode)
    props = unpack_predictions(np.zeros(n), spec, mode)
    assert len(props) == 4 * (2 if mode == LEGACY else 3)
    assert all(p.confidence == 0 for p in props)
    pred = rng.normal(size=n)
    for p in unpack_predictions(pred, spec, mode):
        row, col = divmod(p.cell, 2)
        if mode == LEGACY:
            base = p.cell * (3 + 2 * 9)
            rec = pred[base + 3 + p.slot * 9: base + 3 + (p.slot + 1) * 9]
            cls = pred[base: base + 3]
            shape = rec[5:]
        else:
            base = p.cell * 3 * 12 + p.slot * 12
            rec = pred[base: base + 12]
            cls, shape = rec[5:8], rec[8:]
        assert p.confidence == rec[0]
        expect = ((col + rec[1]) / 2, (row + rec[2]) / 2, max(rec[4], 0) ** 2, max(rec[3], 0) ** 2)
        assert p.box == pytest.approx(expect)
        assert np.array_equal(p.class_scores, cls)
        assert np.array_equal(p.shape_code, shape)
    with pytest.raises(ValueError):
        unpack_predictions(np.zeros(n + 1), spec, mode)


def test_serialization_round_trips(rng):
    spec = GridSpec(3, 2, 3, 4)
    pred = rng.normal(size=layout_size(spec, ANCHOR))
    doc = json.loads(json.dumps(prediction_to_dict(pred, spec, ANCHOR)))
    back, spec2, mode = prediction_from_dict(doc)
    assert mode == ANCHOR and spec2.S == 3 and np.array_equal(back, pred)
    t = encode([box_ann(1, 0.3, 0.3, 0.2, 0.2)], GridSpec(3, 1, 3, 0), ANCHOR)
    t2 = TargetTensor.from_dict(json.loads(json.dumps(t.to_dict())))
    assert np.array_equal(t2.occupied, t.occupied)
    assert np.array_equal(t2.class_id, t.class_id)
    assert np.allclose(t2.box, t.box)


def test_code_length_mismatch():
    with pytest.raises(ValueError):
        encode([], GridSpec(3, 2, 3, 5), LEGACY, codec=DtCodec(8, 4, 16))
