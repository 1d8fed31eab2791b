"""Dataset-level foreground IoU.

Pixel intersections and unions are summed over the whole evaluation split
before dividing, so slices with little foreground do not dominate the way
they would in a mean of per-image scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import kernels

EPSILON = 1e-7


@dataclass
class MetricAccumulator:
    intersection_px: int = 0
    union_px: int = 0
    epsilon: float = EPSILON
    dataset_id: Optional[str] = None

    def update(self, pred, gt) -> "MetricAccumulator":
        """Add one prediction/ground-truth pair. Labels ``> 0`` are foreground."""
        inter, union = kernels.iou_counts(pred, gt)
        self.intersection_px += inter
        self.union_px += union
        return self

    def finalize(self) -> float:
        return self.intersection_px / (self.union_px + self.epsilon)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if self.dataset_id is not None and other.dataset_id is not None and self.dataset_id != other.dataset_id:
            raise ValueError(f"cannot merge accumulators for {self.dataset_id} and {other.dataset_id}")
        return MetricAccumulator(
            self.intersection_px + other.intersection_px,
            self.union_px + other.union_px,
            self.epsilon,
            self.dataset_id if self.dataset_id is not None else other.dataset_id,
        )

    __add__ = merge


def update(acc: MetricAccumulator, pred, gt) -> MetricAccumulator:
    return acc.update(pred, gt)


def finalize(acc: MetricAccumulator) -> float:
    return acc.finalize()


def macro_average(scores) -> float:
    """Unweighted mean of per-dataset scores (mapping or sequence)."""
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if not values:
        raise ValueError("macro_average needs at least one score")
    return float(sum(values) / len(values))


def foreground_iou(preds, gts, epsilon: float = EPSILON) -> float:
    """One-shot helper over an iterable of raster pairs."""
    acc = MetricAccumulator(epsilon=epsilon)
    for p, g in zip(preds, gts):
        acc.update(p, g)
    return acc.finalize()


def mean_std(values):
    """Mean and sample standard deviation (ddof=1; 0.0 for a single run)."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("no values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_mean_std(values, digits: int = 3) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def metrics_payload(per_dataset: Mapping[str, float], fingerprint: str, seed: int) -> dict:
    out = {"iou_fg": {k: float(v) for k, v in per_dataset.items()}}
    out["macro_iou_fg"] = macro_average(per_dataset) if per_dataset else None
    out["fingerprint"] = fingerprint
    out["seed"] = seed
    return out


def write_metrics(path, per_dataset: Mapping[str, float], fingerprint: str, seed: int) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    path.write_text(json.dumps(metrics_payload(per_dataset, fingerprint, seed), indent=2) + "\n", encoding="utf-8")
    return path
