import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stspp.core import (Annotation, BoundingBox, Detection, RleMask, box_mask, crop_resize_mask, iou_box,
                        iou_box_arrays, iou_mask, iou_mask_matrix, paste_mask, rle_decode, rle_encode)

from conftest import disc_mask

boxes = st.builds(BoundingBox, st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1), st.floats(0.01, 1))


def test_iou_box_identical_and_disjoint():
    a = BoundingBox(0.3, 0.3, 0.2, 0.2)
    assert iou_box(a, a) == 1.0
    assert iou_box(a, BoundingBox(0.8, 0.8, 0.2, 0.2)) == 0.0


def test_iou_box_closed_form():
    a = BoundingBox(0.25, 0.25, 0.5, 0.5)
    b = BoundingBox(0.5, 0.5, 0.5, 0.5)
    assert iou_box(a, b) == pytest.approx(0.0625 / 0.4375, abs=1e-12)
    # cross-check against rasterization
    ra, rb = box_mask(a, 1000, 1000), box_mask(b, 1000, 1000)
    assert iou_mask(ra, rb) == pytest.approx(0.142857, abs=1e-3)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_box_symmetric_bounded(a, b):
    v = iou_box(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_box(b, a), abs=1e-12)
    assert iou_box_arrays([a.to_list()], [b.to_list()])[0, 0] == pytest.approx(v, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.builds(BoundingBox, st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.1, 0.4),
                 st.floats(0.1, 0.4)),
       st.builds(BoundingBox, st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.1, 0.4),
                 st.floats(0.1, 0.4)))
def test_iou_box_matches_rasterized(a, b):
    n = 512
    assert iou_box(a, b) == pytest.approx(iou_mask(box_mask(a, n, n), box_mask(b, n, n)), abs=1e-2)


def test_iou_mask_cases(rng):
    m = rng.random((8, 8)) < 0.5
    assert iou_mask(m, m) == 1.0
    assert iou_mask(m, ~m) == 0.0
    empty = np.zeros((4, 4), bool)
    assert iou_mask(empty, empty) == 1.0
    with pytest.raises(ValueError):
        iou_mask(np.zeros((3, 3)), np.zeros((3, 4)))


def test_iou_mask_random_oracle(rng):
    for _ in range(50):
        a, b = rng.random((2, 8, 8)) < 0.4
        inter = sum(a[i, j] and b[i, j] for i in range(8) for j in range(8))
        union = sum(a[i, j] or b[i, j] for i in range(8) for j in range(8))
        expect = inter / union if union else 1.0
        assert iou_mask(a, b) == pytest.approx(expect)
        assert iou_mask_matrix([a], [b])[0, 0] == pytest.approx(expect)


def test_rle_edge_cases():
    assert rle_encode(np.zeros((3, 4), bool)).runs == (12,)
    assert rle_encode(np.ones((3, 4), bool)).runs == (0, 12)
    with pytest.raises(ValueError):
        RleMask(2, 2, (1, 2))
    with pytest.raises(ValueError):
        RleMask(2, 2, (-1, 5))


def test_rle_round_trip_random(rng):
    for _ in range(500):
        h, w = rng.integers(1, 20, 2)
        m = rng.random((h, w)) < rng.random()
        assert np.array_equal(rle_decode(rle_encode(m)), m)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_rle_round_trip_property(h, w, data):
    bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    m = np.array(bits, dtype=bool).reshape(h, w)
    rle = rle_encode(m)
    assert sum(rle.runs) == h * w
    assert np.array_equal(rle_decode(rle), m)


def test_crop_resize_identity_and_full():
    m = disc_mask(32, 16, 16, 10)
    full = BoundingBox(0.5, 0.5, 1.0, 1.0)
    assert np.array_equal(crop_resize_mask(m, full, 32), m)
    assert crop_resize_mask(np.ones((20, 20), bool), BoundingBox(0.5, 0.5, 0.5, 0.5), 7).all()
    with pytest.raises(ValueError):
        crop_resize_mask(m, full, 1)


def test_disc_round_trip_through_smaller_grid():
    m = disc_mask(64, 32, 32, 20)
    full = BoundingBox(0.5, 0.5, 1.0, 1.0)
    small = crop_resize_mask(m, full, 32)
    back = crop_resize_mask(small, full, 64)
    assert iou_mask(back, m) >= 0.9


def test_paste_cases():
    code = disc_mask(16, 8, 8, 6)
    full = BoundingBox(0.5, 0.5, 1.0, 1.0)
    assert iou_mask(paste_mask(code, full, 16, 16), code) == 1.0
    assert not paste_mask(np.zeros((8, 8), bool), full, 20, 20).any()
    box = BoundingBox(0.31, 0.4, 0.3, 0.2)   # edges on whole pixels
    pasted = paste_mask(np.ones((8, 8), bool), box, 50, 50)
    assert not (pasted & ~box_mask(box, 50, 50)).any()


def test_paste_crop_round_trip_discs(rng):
    for _ in range(20):
        m = disc_mask(96, *rng.uniform(30, 66, 2), rng.uniform(8, 25))
        box = BoundingBox.from_mask(m)
        back = paste_mask(crop_resize_mask(m, box, 32), box, 96, 96)
        assert iou_mask(back, m & box_mask(box, 96, 96)) >= 0.85


def test_annotation_tight_box_check():
    m = np.zeros((10, 10), bool)
    m[2:5, 3:7] = True
    ann = Annotation.from_mask(1, m)
    assert ann.bbox.corners() == pytest.approx((0.3, 0.2, 0.7, 0.5))
    with pytest.raises(ValueError):
        Annotation(0, BoundingBox(0.5, 0.5, 0.9, 0.9), m)


def test_detection_confidence_range():
    with pytest.raises(ValueError):
        Detection(0, 1.5, BoundingBox(0.5, 0.5, 0.1, 0.1))


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(1.2, 0.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        BoundingBox(0.5, 0.5, 0.0, 0.1)
