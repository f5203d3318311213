import filecmp

import numpy as np
import pytest

from stspp.core import BoundingBox, Detection
from stspp.dataset import load_dataset, read_detections, save_dataset, write_detections
from stspp.synth import PlacementError, SynthConfig, generate, rasterize, write_splits


def test_single_rectangle_tight_box():
    cfg = SynthConfig(classes=("rectangle",), objects_per_image=(1, 1), n_train=1, n_val=1)
    train, _ = generate(cfg)
    anns = train.annotations_for(0)
    assert len(anns) == 1 and anns[0].class_id == 0
    tight = BoundingBox.from_mask(anns[0].mask)
    assert np.allclose(anns[0].bbox.corners(), tight.corners())
    assert train.pixels[0].shape == (96, 96, 3) and train.pixels[0].dtype == np.uint8


def test_byte_identical_output(tmp_path):
    cfg = SynthConfig(n_train=8, n_val=3, seed=5)
    write_splits(cfg, tmp_path / "a")
    write_splits(cfg, tmp_path / "b")
    for name in ("train.json", "train.npz", "val.json", "val.npz", "synth_config.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_class_mixture():
    cfg = SynthConfig(n_train=500, n_val=1, mixture=(0.5, 0.3, 0.2), seed=2)
    train, _ = generate(cfg)
    ids = np.array([a.class_id for v in train.annotations.values() for a in v])
    freq = np.bincount(ids, minlength=3) / len(ids)
    assert np.all(np.abs(freq - np.array([0.5, 0.3, 0.2])) <= 0.1 * np.array([0.5, 0.3, 0.2]))


def test_centers_distinct_unless_co_centered():
    train, _ = generate(SynthConfig(n_train=50, n_val=1, objects_per_image=(2, 3)))
    for anns in train.annotations.values():
        centers = [(a.bbox.cx * 96, a.bbox.cy * 96) for a in anns]
        for i, a in enumerate(centers):
            for b in centers[i + 1:]:
                assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) > 1.0
    cc, _ = generate(SynthConfig(n_train=20, n_val=1, co_centered=True))
    for anns in cc.annotations.values():
        assert len(anns) == 2
        a, b = anns
        assert abs(a.bbox.cx - b.bbox.cx) * 96 <= 2.0 and abs(a.bbox.cy - b.bbox.cy) * 96 <= 2.0
        assert (a.bbox.w - a.bbox.h) * (b.bbox.w - b.bbox.h) < 0     # one tall, one wide


def test_rasterize_shapes():
    r = rasterize("rectangle", 16, 16, 10, 6, 32)
    assert r.sum() == 60
    e = rasterize("ellipse", 16, 16, 20, 20, 32)
    assert e.sum() == pytest.approx(np.pi * 100, rel=0.05)
    t = rasterize("triangle", 16, 16, 20, 20, 32)
    assert t.sum() == pytest.approx(200, rel=0.1)
    assert t[7:11].sum() < t[22:26].sum()          # apex at the top


def test_placement_error():
    cfg = SynthConfig(n_train=1, n_val=1, objects_per_image=(12, 12), size_range=(0.45, 0.5),
                      max_retries=3)
    with pytest.raises(PlacementError):
        generate(cfg)


def test_config_validation():
    for bad in (dict(image_side=16), dict(n_train=0), dict(classes=("hexagon",)), dict(mixture=(1, 2))):
        with pytest.raises(ValueError):
            SynthConfig(**bad)
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})


def test_dataset_and_detection_io(tmp_path):
    train, _ = generate(SynthConfig(n_train=3, n_val=1))
    save_dataset(train, tmp_path / "d.json")
    back = load_dataset(tmp_path / "d.json")
    assert back.image_ids == train.image_ids
    for i in train.image_ids:
        assert np.array_equal(back.pixels[i], train.pixels[i])
        for a, b in zip(back.annotations_for(i), train.annotations_for(i)):
            assert a.class_id == b.class_id and np.array_equal(a.mask, b.mask)
    assert not load_dataset(tmp_path / "d.json", with_pixels=False).pixels
    dets = [(0, Detection(1, 0.7, BoundingBox(0.5, 0.5, 0.2, 0.2), train.annotations_for(0)[0].mask)),
            (2, Detection(0, 0.3, BoundingBox(0.4, 0.5, 0.1, 0.2)))]
    write_detections(tmp_path / "d.jsonl", dets)
    got = read_detections(tmp_path / "d.jsonl", back)
    assert got[0][0].confidence == 0.7 and np.array_equal(got[0][0].mask, dets[0][1].mask)
    assert got[2][0].mask is None
