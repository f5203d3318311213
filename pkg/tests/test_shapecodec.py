import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stspp.core import iou_mask
from stspp.shapecodec import (BinaryCodec, DtCodec, RadialCodec, codec_from_config, disc, dt_euclidean,
                              dt_quantize, dt_reconstruct, dt_soft_reconstruct)
from stspp.synth import rasterize

from conftest import disc_mask, random_blob


def brute_dt(mask):
    h, w = mask.shape
    # background = image background plus a one-pixel virtual border
    bg = [(y, x) for y in range(-1, h + 1) for x in range(-1, w + 1)
          if not (0 <= y < h and 0 <= x < w) or not mask[y, x]]
    bg = np.array(bg, dtype=float)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                out[y, x] = np.sqrt(((bg - (y, x)) ** 2).sum(1).min())
    return out


def test_dt_examples():
    assert not dt_euclidean(np.zeros((5, 6), bool)).any()
    one = np.zeros((5, 5), bool)
    one[2, 2] = True
    assert dt_euclidean(one)[2, 2] == 1.0
    sq = np.zeros((9, 9), bool)
    sq[2:7, 2:7] = True
    assert dt_euclidean(sq)[4, 4] == 3.0
    assert dt_euclidean(np.ones((3, 3), bool))[1, 1] == 2.0


def test_dt_matches_brute_force(rng):
    for _ in range(100):
        h, w = rng.integers(1, 13, 2)
        m = rng.random((h, w)) < rng.uniform(0.3, 0.95)
        np.testing.assert_allclose(dt_euclidean(m), brute_dt(m), atol=1e-12)


def test_quantize_examples(rng):
    assert not dt_quantize(np.zeros((4, 4)), 8).any()
    assert dt_quantize(np.full((4, 4), 13.0), 8).all()
    m = random_blob(rng, 32)
    lv = dt_quantize(dt_euclidean(m), 8)
    assert np.array_equal(lv[0], m)
    for r in range(1, 8):
        assert not (lv[r] & ~lv[r - 1]).any()
    with pytest.raises(ValueError):
        dt_quantize(-np.ones((2, 2)), 3)


def test_reconstruct_examples():
    assert not dt_reconstruct(np.zeros((8, 5, 5), bool)).any()
    lv = np.zeros((8, 5, 5), bool)
    lv[0, 2, 3] = True
    assert np.array_equal(dt_reconstruct(lv), lv[0])
    bad = np.zeros((2, 4, 4), bool)
    bad[1, 1, 1] = True
    with pytest.raises(ValueError):
        dt_reconstruct(bad)


def test_hard_round_trip_random_blobs(rng):
    for _ in range(200):
        side = int(rng.integers(16, 65))
        m = random_blob(rng, side)
        assert np.array_equal(dt_reconstruct(dt_quantize(dt_euclidean(m), 8)), m)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 8), st.data())
def test_hard_round_trip_any_mask(h, w, levels, data):
    bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    m = np.array(bits, bool).reshape(h, w)
    assert np.array_equal(dt_reconstruct(dt_quantize(dt_euclidean(m), levels)), m)


def test_disc_convention():
    assert disc(1).sum() == 1
    assert disc(2).sum() == 9
    assert disc(3).sum() == 25
    assert disc(4).sum() == 45
    assert disc(8, 15).shape == (15, 15)


def test_soft_reconstruct(rng):
    m = random_blob(rng, 32)
    lv = dt_quantize(dt_euclidean(m), 8).astype(float)
    onehot = np.zeros(9)
    onehot[0] = 1.0
    onehot[-1] = -0.5
    assert np.array_equal(dt_soft_reconstruct(lv, onehot), dt_reconstruct(lv[:1].astype(bool)))
    w = np.r_[np.ones(8), -0.5]
    assert np.array_equal(dt_soft_reconstruct(lv, w), m)
    assert not dt_soft_reconstruct(np.zeros((8, 10, 10)), w).any()
    with pytest.raises(ValueError):
        dt_soft_reconstruct(lv, np.ones(8))


def test_binary_codec():
    c = BinaryCodec(side=16, mask_side=64)
    assert np.allclose(c.encode(np.ones((64, 64), bool)), 1.0)
    full = BinaryCodec(side=8, mask_side=8)
    m = np.random.default_rng(0).random((8, 8)) < 0.5
    assert np.array_equal(full.encode(m), m.ravel().astype(float))
    assert np.array_equal(full.decode(full.encode(m)), m)
    d = disc_mask(64, 32, 32, 22)
    assert iou_mask(c.decode(c.encode(d)), d) >= 0.85
    with pytest.raises(ValueError):
        c.encode(np.ones((32, 32), bool))


def test_radial_codec():
    c = RadialCodec(n_angles=32, mask_side=64)
    rho = 20
    code = c.encode(disc_mask(64, 32, 32, rho))
    # rays end within a pixel of the true radius
    assert np.abs(code[:32] - 2 * rho / 64).max() <= 1.5 / 32
    sq = np.zeros((64, 64), bool)
    sq[16:48, 16:48] = True
    c4 = RadialCodec(n_angles=4, mask_side=64)
    assert np.ptp(c4.encode(sq)[:4]) <= 1 / 32   # one pixel of ray quantization
    blob = rasterize("ellipse", 30, 34, 40, 28, 64)
    assert iou_mask(c.decode(c.encode(blob)), blob) >= 0.9
    with pytest.raises(ValueError):
        c.encode(np.zeros((64, 64), bool))
    ring = disc_mask(64, 32, 32, 25) & ~disc_mask(64, 32, 32, 15)
    with pytest.raises(ValueError):
        c.encode(ring)


@pytest.mark.parametrize("mask_side", [47, 64])
def test_dt_codec_round_trip(mask_side, rng):
    c = DtCodec(levels=8, code_side=16, mask_side=mask_side)
    assert c.code_length == 256
    for _ in range(10):
        m = random_blob(rng, mask_side)
        small_rt = c.decode(c.encode(m), out_side=16)
        assert np.array_equal(small_rt, c.level_masks(m)[0])
        assert iou_mask(c.decode(c.encode(m)), m) >= 0.8


def test_codec_config_round_trip():
    for c in (BinaryCodec(8, 47), RadialCodec(16, 47), DtCodec(8, 12, 48)):
        cfg = json.loads(json.dumps(c.to_config()))
        c2 = codec_from_config(cfg)
        assert c2.to_config() == c.to_config()
        assert c2.code_length == c.code_length
    with pytest.raises((ValueError, KeyError)):
        codec_from_config({"kind": "nope"})
