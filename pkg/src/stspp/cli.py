"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad arguments, config or input
content), 2 I/O error (missing or unwritable files).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _load_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_seed(args, cmd: str) -> int:
    if args.seed is None:
        raise UsageError(f"{cmd}: --seed is required (the command is randomized)")
    return int(args.seed)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _nan_to_none(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SynthConfig, write_splits

    cfg = _load_json(args.config)
    cfg["seed"] = _require_seed(args, "synth")
    for key in ("n_train", "n_val", "image_side"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.co_centered:
        cfg["co_centered"] = True
    paths = write_splits(SynthConfig.from_dict(cfg), _out_dir(args))
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def _codec(args):
    from .shapecodec import codec_from_config

    cfg = _load_json(args.config)
    cfg.setdefault("kind", args.kind)
    if cfg["kind"] != args.kind:
        raise ValueError(f"--kind {args.kind} conflicts with config kind {cfg['kind']}")
    return codec_from_config(cfg)


def cmd_codec(args) -> int:
    from .core import BoundingBox, RleMask, crop_resize_mask, iou_mask, rle_decode, rle_encode
    from .dataset import load_dataset

    codec = _codec(args)
    out = _out_dir(args)
    if args.action in ("encode", "roundtrip"):
        ds = load_dataset(args.input, with_pixels=False)
        records, rows = [], []
        for image_id in ds.image_ids:
            for k, ann in enumerate(ds.annotations_for(image_id)):
                crop = crop_resize_mask(ann.mask, ann.bbox, codec.mask_side)
                code = codec.encode(crop)
                if args.action == "encode":
                    records.append({"image_id": image_id, "index": k, "class_id": ann.class_id,
                                    "bbox": ann.bbox.to_list(), "code": [round(float(c), 9) for c in code]})
                else:
                    iou = iou_mask(codec.decode(code, codec.mask_side), crop)
                    rows.append((image_id, k, ann.class_id, iou))
        if args.action == "encode":
            _write_json(out / "codes.json", {"codec": codec.to_config(), "codes": records})
            print(f"encoded {len(records)} masks -> {out / 'codes.json'}")
            return EXIT_OK
        ious = np.array([r[3] for r in rows]) if rows else np.zeros(0)
        per_class = {}
        for c in sorted({r[2] for r in rows}):
            per_class[str(c)] = float(np.mean([r[3] for r in rows if r[2] == c]))
        report = {"codec": codec.to_config(), "count": len(rows),
                  "mean_iou": float(ious.mean()) if rows else None,
                  "min_iou": float(ious.min()) if rows else None, "per_class_mean_iou": per_class}
        _write_json(out / "roundtrip.json", report)
        _write_csv(out / "roundtrip.csv", ("image_id", "index", "class_id", "iou"), rows)
        print(json.dumps({k: report[k] for k in ("count", "mean_iou", "min_iou")}))
        return EXIT_OK
    # decode
    doc = _load_json(args.input)
    if "codes" not in doc:
        raise ValueError(f"{args.input}: expected a codes document with a 'codes' list")
    masks = []
    for rec in doc["codes"]:
        mask = codec.decode(np.asarray(rec["code"], dtype=float), codec.mask_side)
        rle = rle_encode(mask)
        masks.append({**{k: rec[k] for k in ("image_id", "index", "class_id") if k in rec},
                      "width": rle.width, "height": rle.height, "rle": list(rle.runs)})
    _write_json(out / "masks.json", {"codec": codec.to_config(), "masks": masks})
    print(f"decoded {len(masks)} codes -> {out / 'masks.json'}")
    return EXIT_OK


def _thresholds(spec: str) -> tuple[float, ...]:
    from .evaluation import COCO_THRESHOLDS, VOL_THRESHOLDS

    if spec == "vol":
        return VOL_THRESHOLDS
    if spec == "coco":
        return COCO_THRESHOLDS
    try:
        vals = tuple(float(v) for v in spec.split(","))
    except ValueError:
        raise ValueError(f"thresholds must be 'vol', 'coco' or a comma list, got {spec!r}") from None
    return vals


def cmd_eval(args) -> int:
    from .dataset import load_dataset, read_detections
    from .evaluation import COCO_THRESHOLDS, VOL_THRESHOLDS, EvalConfig, map_sweep
    from .plotting import plot_map_curve

    gts = load_dataset(args.gt, with_pixels=False)
    dets = read_detections(args.det, gts)
    unknown = set(dets) - set(gts.image_ids)
    if unknown:
        raise ValueError(f"detections reference unknown image ids {sorted(unknown)[:5]}")
    thresholds = _thresholds(args.thresholds)
    cfg = EvalConfig(thresholds, args.criterion, args.jobs)
    classes = range(args.classes) if args.classes else None
    every = sorted(set(thresholds) | set(VOL_THRESHOLDS) | set(COCO_THRESHOLDS))
    results = {r.threshold: r for r in map_sweep(gts.annotations, dets, every, cfg, classes)}
    chosen = [results[t] for t in thresholds]
    report = {
        "criterion": args.criterion,
        "thresholds": list(thresholds),
        "per_class": {str(c): {f"{r.threshold:g}": r.per_class[c] for r in chosen}
                      for c in sorted(chosen[0].per_class)} if chosen else {},
        "mAP": {f"{r.threshold:g}": r.mAP for r in chosen},
        "mAP_vol": float(np.mean([results[t].mAP for t in VOL_THRESHOLDS])),
        "mAP_coco": float(np.mean([results[t].mAP for t in COCO_THRESHOLDS])),
    }
    out = _out_dir(args)
    _write_json(out / "eval.json", report)
    header = ["class"] + [f"AP@{t:g}" for t in thresholds]
    rows = [[c] + [report["per_class"][c][f"{t:g}"] for t in thresholds] for c in report["per_class"]]
    rows.append(["mAP"] + [report["mAP"][f"{t:g}"] for t in thresholds])
    _write_csv(out / "eval.csv", header, rows)
    _write_csv(out / "eval_summary.csv", ("mAP@0.5", "mAP@0.7", "mAP_vol", "mAP_coco"),
               [(results[0.5].mAP, results[0.7].mAP, report["mAP_vol"], report["mAP_coco"])])
    if args.plot:
        plot_map_curve(chosen, out / "map_curve.png")
    print(json.dumps({"mAP_vol": report["mAP_vol"], "mAP_coco": report["mAP_coco"],
                      "mAP@0.5": results[0.5].mAP}))
    return EXIT_OK


def _groups(args) -> dict:
    from .evaluation import VOC_CLASSES, VOC_SIMILARITY_GROUPS, groups_from_names

    if not args.groups:
        return groups_from_names(VOC_SIMILARITY_GROUPS, VOC_CLASSES)
    doc = _load_json(args.groups)
    names = doc.pop("class_names", None)
    groups = doc.get("groups", doc)
    if all(isinstance(v, int) for members in groups.values() for v in members):
        return {g: list(m) for g, m in groups.items()}
    return groups_from_names(groups, names or VOC_CLASSES)


def cmd_analyze(args) -> int:
    from .dataset import load_dataset, read_detections
    from .evaluation import FP_TYPES, TAXONOMY_TYPES, error_taxonomy
    from .plotting import plot_taxonomy

    gts = load_dataset(args.gt, with_pixels=False)
    dets = read_detections(args.det, gts)
    br = error_taxonomy(gts.annotations, dets, _groups(args), criterion=args.criterion)
    out = _out_dir(args)
    _write_json(out / "taxonomy.json", br.to_dict())
    _write_csv(out / "taxonomy.csv", list(TAXONOMY_TYPES) + [f"FP_{k}" for k in FP_TYPES],
               [[br.fractions[k] for k in TAXONOMY_TYPES] + [br.fp_shares[k] for k in FP_TYPES]])
    if args.plot:
        plot_taxonomy(br, out / "taxonomy.png")
    print(json.dumps(br.fractions))
    return EXIT_OK


def cmd_arch(args) -> int:
    from .archspec import cost_report, format_text, load_builtin_table, parse_table, report_json, report_rows
    from .plotting import plot_arch_costs

    if args.builtin:
        table = load_builtin_table(args.builtin)
    elif args.table:
        table = parse_table(Path(args.table).read_text(), name=Path(args.table).stem)
    else:
        raise UsageError("arch: give a table file or --builtin NAME")
    unit = args.unit or table.unit or "M"
    report = cost_report(table)
    sys.stdout.write(format_text(report, unit))
    if args.out:
        out = _out_dir(args)
        stem = table.name or "table"
        _write_json(out / f"{stem}.json", report_json(report, unit))
        rows = report_rows(report, unit)
        _write_csv(out / f"{stem}.csv", list(rows[0].keys()), [list(r.values()) for r in rows])
        if args.plot:
            plot_arch_costs(report, out / f"{stem}.png", unit)
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training_trace
    from .tinynet.net import save_checkpoint

    seed = _require_seed(args, "train")
    cfg = _load_json(args.config)
    cfg["seed"] = seed
    out = _out_dir(args)
    if args.kind == "autoencoder":
        from .core import crop_resize_mask
        from .dataset import load_dataset
        from .tinynet.autoencoder import AutoencoderConfig, default_training_set, train_autoencoder

        side = int(cfg.pop("side", 32))
        count = int(cfg.pop("count", 64))
        if args.train:
            ds = load_dataset(args.train, with_pixels=False)
            masks = np.stack([crop_resize_mask(a.mask, a.bbox, side)
                              for i in ds.image_ids for a in ds.annotations_for(i)][:count])
        else:
            masks = default_training_set(count, side, seed)
        res = train_autoencoder(masks, AutoencoderConfig.from_dict(cfg))
        save_checkpoint(res.encoder, out / "encoder.tnck", {"side": side})
        save_checkpoint(res.decoder, out / "decoder.tnck", {"side": side})
        rows = [(e, b) for e, b in enumerate(res.epoch_bce)]
        _write_csv(out / "trace.csv", ("epoch", "bce"), rows)
        if args.plot:
            plot_training_trace([{"epoch": e, "bce": b} for e, b in rows], out / "trace.png", "bce", None)
        print(json.dumps({"final_bce": res.final_bce, "epochs": len(rows) - 1}))
        return EXIT_OK

    from .dataset import load_dataset, write_detections
    from .tinynet.detector import TRACE_FIELDS, DetectorConfig, detect, train_detector

    if not args.train:
        raise UsageError("train detector: --train DATASET is required")
    train = load_dataset(args.train)
    val = load_dataset(args.val) if args.val else None
    dcfg = DetectorConfig.from_dict(cfg)
    progress = (lambda row: print(json.dumps(_nan_to_none({k: row[k] for k in TRACE_FIELDS})),
                                  file=sys.stderr)) if args.verbose else None
    res = train_detector(train, val, dcfg, n_classes=args.classes, progress=progress)
    save_checkpoint(res.net, out / "detector.tnck",
                    {"config": dcfg.to_dict(), "C": res.spec.C, "M": res.spec.M})
    _write_csv(out / "trace.csv", TRACE_FIELDS, [[r[k] for k in TRACE_FIELDS] for r in res.trace])
    if val is not None:
        dets = detect(res.net, val, res.spec, dcfg.mode, res.codec)
        write_detections(out / "val_detections.jsonl",
                         ((i, d) for i in val.image_ids for d in dets.get(i, [])))
    if args.plot:
        plot_training_trace(res.trace, out / "trace.png")
    print(json.dumps({"epochs": res.trace[-1]["epoch"],
                      "final_loss": _nan_to_none(res.trace[-1])["loss"],
                      "val_map50": None if math.isnan(res.final_map50) else res.final_map50}))
    return EXIT_OK


def cmd_augment(args) -> int:
    from .augment import AugmentConfig, augment
    from .dataset import Dataset, load_dataset, save_dataset

    seed = _require_seed(args, "augment")
    cfg = AugmentConfig.from_dict(_load_json(args.config))
    ds = load_dataset(args.dataset)
    rng = np.random.default_rng(seed)
    out = _out_dir(args)
    images, anns, pixels, trace = [], {}, {}, []
    for rec in ds.images:
        if rec.id not in ds.pixels:
            raise ValueError(f"image {rec.id} has no pixel data")
        for k in range(args.copies):
            img, new_anns, sample = augment(ds.pixels[rec.id], ds.annotations_for(rec.id), cfg, rng)
            new_id = rec.id * args.copies + k
            images.append(type(rec)(new_id, rec.width, rec.height))
            anns[new_id] = new_anns
            pixels[new_id] = img
            trace.append({"image_id": new_id, "source_id": rec.id, **sample.to_dict()})
    save_dataset(Dataset(images, anns, pixels), out / "augmented.json")
    header = ("image_id", "source_id", "angle_deg", "dx", "dy", "scale", "flip", "intensity_scale",
              "intensity_offset")
    _write_csv(out / "augment_params.csv", header, [[int(r[h]) if h == "flip" else r[h] for h in header]
                                                    for r in trace])
    print(f"wrote {len(images)} augmented images -> {out / 'augmented.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed (required by randomized commands)")
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker threads for evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stspp", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("synth", "generate a synthetic train/val dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--image-side", type=int)
    p.add_argument("--co-centered", action="store_true", help="two co-centered objects per image")
    p.set_defaults(func=cmd_synth)

    p = add("codec", "encode, decode or round-trip instance masks through a shape codec")
    p.add_argument("action", choices=("encode", "decode", "roundtrip"))
    p.add_argument("input", help="dataset JSON (encode/roundtrip) or codes JSON (decode)")
    p.add_argument("--kind", choices=("binary", "radial", "dt"), default="dt")
    p.set_defaults(func=cmd_codec)

    p = add("eval", "mAP report for detections against ground truth")
    p.add_argument("gt")
    p.add_argument("det")
    p.add_argument("--criterion", choices=("mask", "box"), default="mask")
    p.add_argument("--thresholds", default="vol", help="'vol', 'coco' or a comma list")
    p.add_argument("--classes", type=int, help="number of classes (default: classes with ground truth)")
    p.add_argument("--plot", action="store_true", help="also write map_curve.png")
    p.set_defaults(func=cmd_eval)

    p = add("analyze", "five-type error taxonomy of the top-ranked detections")
    p.add_argument("gt")
    p.add_argument("det")
    p.add_argument("--groups", help="JSON similarity groups (class ids or names)")
    p.add_argument("--criterion", choices=("mask", "box"), default="box")
    p.add_argument("--plot", action="store_true", help="also write taxonomy.png")
    p.set_defaults(func=cmd_analyze)

    p = add("arch", "ops/params accounting for a layer table")
    p.add_argument("table", nargs="?", help="table file")
    p.add_argument("--builtin", help="bundled table name instead of a file")
    p.add_argument("--unit", choices=("M", "K"))
    p.add_argument("--plot", action="store_true", help="also write a cost bar chart")
    p.set_defaults(func=cmd_arch)

    p = add("train", "train the shape autoencoder or the grid detector")
    p.add_argument("kind", choices=("autoencoder", "detector"))
    p.add_argument("--train", help="training dataset JSON")
    p.add_argument("--val", help="validation dataset JSON (detector)")
    p.add_argument("--classes", type=int, help="number of classes (default: inferred)")
    p.add_argument("--plot", action="store_true", help="also write trace.png")
    p.add_argument("-v", "--verbose", action="store_true", help="print trace rows to stderr")
    p.set_defaults(func=cmd_train)

    p = add("augment", "write an augmented copy of a dataset")
    p.add_argument("dataset")
    p.add_argument("--copies", type=int, default=1)
    p.set_defaults(func=cmd_augment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
