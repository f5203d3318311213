import json

import numpy as np
import pytest

from stspp.augment import (AugmentConfig, AugmentSample, apply_affine, apply_photometric, augment,
                           sample_params)
from stspp.core import Annotation, BoundingBox, iou_mask


def square_scene(side=64):
    m = np.zeros((side, side), bool)
    m[20:44, 20:44] = True
    img = np.random.default_rng(0).integers(0, 256, (side, side, 3), dtype=np.uint8)
    return img, [Annotation.from_mask(1, m)]


def test_identity_sample():
    s = sample_params(AugmentConfig.identity(), np.random.default_rng(0))
    assert s == AugmentSample()
    img, anns = square_scene()
    out, out_anns = apply_affine(img, anns, s)
    assert np.array_equal(out, img)
    assert np.array_equal(out_anns[0].mask, anns[0].mask)
    assert np.array_equal(apply_photometric(img, s), img)


def test_monte_carlo_distributions():
    rng = np.random.default_rng(7)
    cfg = AugmentConfig()
    draws = [sample_params(cfg, rng) for _ in range(100_000)]
    assert np.mean([d.flip for d in draws]) == pytest.approx(0.5, abs=0.01)
    assert np.mean([np.log(d.scale) for d in draws]) == pytest.approx(0.0, abs=0.005)
    for d in draws[:2000]:
        assert -20 <= d.angle_deg <= 20 and -0.15 <= d.dx <= 0.15 and -0.15 <= d.dy <= 0.15
        assert 1 / 1.2 <= d.scale <= 1.2 and 1 / 1.2 <= d.intensity_scale <= 1.2
        assert -10 <= d.intensity_offset <= 10


def test_sampling_reproducible():
    a = [sample_params(AugmentConfig(), np.random.default_rng(3)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_flip_twice_is_identity():
    img, anns = square_scene()
    m = anns[0].mask.copy()
    m[20:30, 20:25] = False          # break the symmetry
    anns = [Annotation.from_mask(0, m)]
    flip = AugmentSample(flip=True)
    _, once = apply_affine(img, anns, flip)
    assert not np.array_equal(once[0].mask, m)
    _, twice = apply_affine(img, once, flip)
    assert np.array_equal(twice[0].mask, m)


def test_rotate_90_square():
    img, anns = square_scene()
    _, out = apply_affine(img, anns, AugmentSample(angle_deg=90.0))
    assert iou_mask(out[0].mask, anns[0].mask) >= 0.95


def test_boxes_tight_after_augment(rng):
    img, anns = square_scene()
    for _ in range(30):
        _, out, _ = augment(img, anns, AugmentConfig(), rng)
        for a in out:
            tight = BoundingBox.from_mask(a.mask)
            assert np.allclose(a.bbox.corners(), tight.corners())


def test_annotation_dropped_when_out_of_frame():
    img, anns = square_scene()
    _, out = apply_affine(img, anns, AugmentSample(dx=0.9))
    assert out == []


def test_photometric_examples():
    zero = np.zeros((2, 2, 3), np.uint8)
    assert (apply_photometric(zero, AugmentSample(intensity_offset=10)) == 10).all()
    v = np.full((1, 1, 3), 250, np.uint8)
    assert (apply_photometric(v, AugmentSample(intensity_scale=1.2)) == 255).all()
    assert (apply_photometric(zero, AugmentSample(intensity_offset=-10)) == 0).all()


def test_out_of_frame_fill_is_channel_mean():
    img = np.zeros((32, 32, 3), np.uint8)
    img[..., 0] = 200
    img[:16, :, 1] = 100
    out, _ = apply_affine(img, [], AugmentSample(dx=0.5))
    assert out[5, 2].tolist() == [200, 50, 0]


def test_config_io(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"rotation_deg": [-5, 5], "flip_prob": 0.0}))
    cfg = AugmentConfig.from_json(tmp_path / "a.json")
    assert cfg.rotation_deg == (-5.0, 5.0) and cfg.flip_prob == 0.0
    with pytest.raises(ValueError):
        AugmentConfig.from_dict({"cutout": 1})
    with pytest.raises(ValueError):
        AugmentConfig(scale=(0, 1))
    with pytest.raises(ValueError):
        AugmentConfig(rotation_deg=(5, -5))
