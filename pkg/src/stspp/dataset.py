"""Dataset JSON, detection JSONL and deterministic image-archive serialization."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import Annotation, BoundingBox, Detection, ImageRecord, RleMask, rle_decode, rle_encode


@dataclass
class Dataset:
    images: list[ImageRecord]
    annotations: dict[int, list[Annotation]] = field(default_factory=dict)
    pixels: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def image(self, image_id: int) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return self.annotations.get(image_id, [])

    @property
    def image_ids(self) -> list[int]:
        return [rec.id for rec in self.images]


def _num(x: float) -> float:
    # repr-stable float output
    return float(round(float(x), 12))


def dataset_to_dict(ds: Dataset) -> dict:
    images = []
    for rec in ds.images:
        entry = {"id": rec.id, "width": rec.width, "height": rec.height}
        if rec.file is not None:
            entry["file"] = rec.file
        images.append(entry)
    anns = []
    for rec in ds.images:
        for ann in ds.annotations_for(rec.id):
            anns.append({
                "image_id": rec.id,
                "class_id": int(ann.class_id),
                "bbox": [_num(v) for v in ann.bbox.to_list()],
                "rle": list(rle_encode(ann.mask).runs),
            })
    return {"images": images, "annotations": anns}


def dataset_from_dict(doc: dict) -> Dataset:
    try:
        images = [ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), im.get("file"))
                  for im in doc["images"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed images section: {exc}") from exc
    by_id = {rec.id: rec for rec in images}
    annotations: dict[int, list[Annotation]] = {rec.id: [] for rec in images}
    for i, a in enumerate(doc.get("annotations", [])):
        try:
            rec = by_id[int(a["image_id"])]
            mask = rle_decode(RleMask(rec.width, rec.height, a["rle"]))
            ann = Annotation(int(a["class_id"]), BoundingBox(*a["bbox"]), mask)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed annotation #{i}: {exc}") from exc
        annotations[rec.id].append(ann)
    return Dataset(images, annotations)


def save_dataset(ds: Dataset, path: str | Path, pixels_name: Optional[str] = None) -> None:
    """Write the dataset JSON and, when pixels are present, a sibling ``.npz`` archive."""
    path = Path(path)
    if ds.pixels:
        pixels_name = pixels_name or path.with_suffix(".npz").name
        for rec in ds.images:
            rec.file = pixels_name
        write_npz(path.parent / pixels_name, {str(k): v for k, v in sorted(ds.pixels.items())})
    path.write_text(json.dumps(dataset_to_dict(ds), separators=(",", ":")) + "\n")


def load_dataset(path: str | Path, with_pixels: bool = True) -> Dataset:
    path = Path(path)
    ds = dataset_from_dict(json.loads(path.read_text()))
    if with_pixels:
        archives: dict[str, np.lib.npyio.NpzFile] = {}
        for rec in ds.images:
            if rec.file is None:
                continue
            if rec.file not in archives:
                archives[rec.file] = np.load(path.parent / rec.file)
            ds.pixels[rec.id] = archives[rec.file][str(rec.id)]
    return ds


def write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps so output is byte-stable."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def detection_to_dict(image_id: int, det: Detection) -> dict:
    out = {
        "image_id": int(image_id),
        "class_id": int(det.class_id),
        "confidence": _num(det.confidence),
        "bbox": [_num(v) for v in det.bbox.to_list()],
    }
    if det.mask is not None:
        rle = rle_encode(det.mask)
        out["width"], out["height"] = rle.width, rle.height
        out["rle"] = list(rle.runs)
    return out


def write_detections(path: str | Path, detections: Iterable[tuple[int, Detection]]) -> None:
    with open(path, "w") as fh:
        for image_id, det in detections:
            fh.write(json.dumps(detection_to_dict(image_id, det), separators=(",", ":")) + "\n")


def read_detections(path: str | Path, dataset: Optional[Dataset] = None) -> dict[int, list[Detection]]:
    """Read detection JSONL; mask dims come from the record or from ``dataset``."""
    out: dict[int, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id = int(rec["image_id"])
                mask = None
                if "rle" in rec:
                    if "width" in rec:
                        w, h = int(rec["width"]), int(rec["height"])
                    elif dataset is not None:
                        im = dataset.image(image_id)
                        w, h = im.width, im.height
                    else:
                        raise ValueError("mask dimensions unknown")
                    mask = rle_decode(RleMask(w, h, rec["rle"]))
                det = Detection(int(rec["class_id"]), float(rec["confidence"]),
                                BoundingBox(*rec["bbox"]), mask)
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"line {lineno}: malformed detection ({exc})") from exc
            out.setdefault(image_id, []).append(det)
    return out
