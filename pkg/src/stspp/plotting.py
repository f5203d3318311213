"""Report figures written to image files (no interactive display)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .archspec import UNITS, CostReport  # noqa: E402
from .evaluation import FP_TYPES, TAXONOMY_TYPES, ApResult, ErrorBreakdown  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META if path.suffix.lower() == ".png" else None)
    plt.close(fig)
    return path


def plot_arch_costs(report: CostReport, path: str | Path, unit: str = "M") -> Path:
    """Per-layer ops and params as paired bar charts."""
    scale = UNITS[unit]
    idx = [r.index for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, 0.25 * len(idx)), 5), sharex=True)
    ax1.bar(idx, [r.ops / scale for r in report.rows], color="tab:blue")
    ax1.set_ylabel(f"ops (x{scale:g})")
    ax2.bar(idx, [r.params / scale for r in report.rows], color="tab:orange")
    ax2.set_ylabel(f"params (x{scale:g})")
    ax2.set_xlabel("layer")
    ax1.set_title(report.name or "architecture cost")
    return _save(fig, path)


def plot_map_curve(results: Sequence[ApResult], path: str | Path,
                   class_names: Mapping[int, str] | None = None) -> Path:
    """mAP (and per-class AP) against the IoU threshold."""
    ts = [r.threshold for r in results]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    classes = sorted({c for r in results for c in r.per_class})
    for c in classes:
        name = (class_names or {}).get(c, str(c))
        ax.plot(ts, [r.per_class.get(c, 0.0) for r in results], lw=1, alpha=0.6, label=name)
    ax.plot(ts, [r.mAP for r in results], "k-o", lw=2, label="mAP")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_taxonomy(breakdown: ErrorBreakdown, path: str | Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.bar(TAXONOMY_TYPES, [breakdown.fractions[k] for k in TAXONOMY_TYPES], color="tab:green")
    ax1.set_ylabel("fraction of top detections")
    ax1.set_ylim(0, 1)
    ax2.bar(FP_TYPES, [breakdown.fp_shares[k] for k in FP_TYPES], color="tab:red")
    ax2.set_ylabel("share of false positives (%)")
    ax2.set_ylim(0, 100)
    return _save(fig, path)


def plot_training_trace(trace: Sequence[Mapping], path: str | Path, loss_key: str = "loss",
                        metric_key: str | None = "val_map50") -> Path:
    rows = [r for r in trace if r.get(loss_key) == r.get(loss_key)]   # drop NaN losses
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["epoch"] for r in rows], [r[loss_key] for r in rows], "b-", label=loss_key)
    ax.set_xlabel("epoch")
    ax.set_ylabel(loss_key, color="b")
    if metric_key and any(metric_key in r for r in trace):
        pts = [(r["epoch"], r[metric_key]) for r in trace if r.get(metric_key) == r.get(metric_key)]
        ax2 = ax.twinx()
        ax2.plot([p[0] for p in pts], [p[1] for p in pts], "r-o", ms=3, label=metric_key)
        ax2.set_ylabel(metric_key, color="r")
        ax2.set_ylim(0, 1)
    return _save(fig, path)
