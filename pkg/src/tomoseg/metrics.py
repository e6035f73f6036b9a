"""
Segmentation metrics and cluster -> class confusion tables.

Purpose:
- Pixel accuracy and mIoU of a predicted label map against ground truth,
  with ground-truth classes (background by default) masked out.
- Count how pseudo-label clusters end up in the final classes.
- Optimal one-to-one matching of predicted classes to ground-truth classes
  when the two label sets were numbered independently.

Conventions:
- Ignoring is by ground-truth class: a pixel whose gt class is ignored is
  not evaluated, whatever was predicted there.
- A class absent from the evaluated ground truth is left out of the mIoU
  mean; if it was predicted it is listed in absent_classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable
import json
import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from .volume_io import LabelVolume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    """
    Accuracy/IoU summary. per_class_iou is NaN where a class is ignored or
    absent from the ground truth.
    """

    pixel_accuracy: float
    per_class_iou: tuple[float, ...]
    miou: float
    ignored_classes: tuple[int, ...]
    pixel_counts: tuple[int, ...]
    absent_classes: tuple[int, ...] = ()
    breakdown: dict[str, "MetricReport"] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.per_class_iou)

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["per_class_iou"] = [None if math.isnan(v) else v for v in self.per_class_iou]
        payload["breakdown"] = {name: report.to_dict() for name, report in self.breakdown.items()}
        return payload


@dataclass(frozen=True)
class ClusterClassMatrix:
    counts: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "counts": self.counts.astype(int).tolist(),
        }

    def format_table(self) -> str:
        width = max(8, max(len(str(int(v))) for v in self.counts.flat) + 1) if self.counts.size else 8
        header = " " * 6 + "".join(f"{label:>{width}}" for label in self.col_labels)
        rows = [
            f"{label:<6}" + "".join(f"{int(v):>{width}}" for v in row)
            for label, row in zip(self.row_labels, self.counts)
        ]
        return "\n".join([header, *rows])


def _as_labels(labels: LabelVolume | np.ndarray) -> np.ndarray:
    if isinstance(labels, LabelVolume):
        return labels.labels
    return np.asarray(labels)


def _evaluable(pred: np.ndarray, gt: np.ndarray, ignore: Iterable[int]) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: pred {pred.shape} vs gt {gt.shape}.")
    ignore = tuple(int(c) for c in ignore)
    if not ignore:
        return np.ones(gt.shape, dtype=bool)
    return ~np.isin(gt, ignore)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """
    counts[g, p] = number of pixels with gt class g predicted as p.
    """

    flat = gt.astype(np.int64).reshape(-1) * num_classes + pred.astype(np.int64).reshape(-1)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def pixel_accuracy(
    pred: LabelVolume | np.ndarray,
    gt: LabelVolume | np.ndarray,
    ignore: Iterable[int] = (0,),
) -> float:
    pred, gt = _as_labels(pred), _as_labels(gt)
    keep = _evaluable(pred, gt, ignore)
    total = int(keep.sum())
    if total == 0:
        raise ValueError("No evaluable pixels: every ground-truth pixel belongs to an ignored class.")
    return float(np.count_nonzero(pred[keep] == gt[keep]) / total)


def miou(
    pred: LabelVolume | np.ndarray,
    gt: LabelVolume | np.ndarray,
    ignore: Iterable[int] = (0,),
    num_classes: int | None = None,
) -> MetricReport:
    """
    Per-class IoU over evaluable pixels and their mean over classes present
    in the ground truth.
    """

    pred, gt = _as_labels(pred), _as_labels(gt)
    ignore = tuple(sorted(int(c) for c in ignore))
    keep = _evaluable(pred, gt, ignore)
    if not keep.any():
        raise ValueError("No evaluable pixels: every ground-truth pixel belongs to an ignored class.")

    seen = max(int(pred.max(initial=0)), int(gt.max(initial=0))) + 1
    k = max(num_classes or 0, seen)
    cm = confusion_counts(pred[keep], gt[keep], k)
    inter = np.diag(cm).astype(np.float64)
    gt_total = cm.sum(axis=1)
    pred_total = cm.sum(axis=0)
    union = gt_total + pred_total - inter

    per_class = np.full(k, np.nan)
    scored = [c for c in range(k) if c not in ignore and gt_total[c] > 0]
    if not scored:
        raise ValueError("No evaluable classes in ground truth.")
    for c in scored:
        per_class[c] = inter[c] / union[c]
    absent = tuple(int(c) for c in range(k) if gt_total[c] == 0 and pred_total[c] > 0)

    return MetricReport(
        pixel_accuracy=float(inter.sum() / cm.sum()),
        per_class_iou=tuple(float(v) for v in per_class),
        miou=float(np.mean(per_class[scored])),
        ignored_classes=ignore,
        pixel_counts=tuple(int(v) for v in np.bincount(gt.reshape(-1).astype(np.int64), minlength=k)),
        absent_classes=absent,
    )


def cluster_class_confusion(
    pseudo: LabelVolume | np.ndarray,
    final: LabelVolume | np.ndarray,
    exclude_background: bool = True,
    *,
    num_pseudo: int | None = None,
    num_final: int | None = None,
) -> ClusterClassMatrix:
    """
    counts[k][c] = voxels that started in cluster k and ended in class c.
    """

    kp = num_pseudo or (pseudo.num_classes if isinstance(pseudo, LabelVolume) else None)
    kf = num_final or (final.num_classes if isinstance(final, LabelVolume) else None)
    p, f = _as_labels(pseudo), _as_labels(final)
    if p.shape != f.shape:
        raise ValueError(f"Shape mismatch: pseudo {p.shape} vs final {f.shape}.")
    kp = kp or int(p.max(initial=0)) + 1
    kf = kf or int(f.max(initial=0)) + 1

    flat = p.astype(np.int64).reshape(-1) * kf + f.astype(np.int64).reshape(-1)
    counts = np.bincount(flat, minlength=kp * kf).reshape(kp, kf)
    rows = tuple(f"K{k}" for k in range(kp))
    if exclude_background:
        counts = counts[1:]
        rows = rows[1:]
    return ClusterClassMatrix(counts=counts, row_labels=rows, col_labels=tuple(f"C{c}" for c in range(kf)))


def match_classes(
    pred: LabelVolume | np.ndarray,
    gt: LabelVolume | np.ndarray,
    num_pred: int,
    num_gt: int,
) -> np.ndarray:
    """
    Map each predicted class to a ground-truth class by maximum total
    overlap (Hungarian assignment). Unmatched predicted classes map to num_gt.
    """

    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Shape mismatch: pred {pred.shape} vs gt {gt.shape}.")
    flat = pred.astype(np.int64).reshape(-1) * num_gt + gt.astype(np.int64).reshape(-1)
    overlap = np.bincount(flat, minlength=num_pred * num_gt).reshape(num_pred, num_gt)
    rows, cols = linear_sum_assignment(-overlap)
    mapping = np.full(num_pred, num_gt, dtype=np.int64)
    mapping[rows] = cols
    return mapping


def matched_miou(
    pred: LabelVolume | np.ndarray,
    gt: LabelVolume | np.ndarray,
    num_pred: int,
    num_gt: int,
    ignore: Iterable[int] = (0,),
) -> MetricReport:
    """
    mIoU after relabeling pred through match_classes().
    """

    mapping = match_classes(pred, gt, num_pred, num_gt)
    remapped = mapping[_as_labels(pred).astype(np.int64)]
    return miou(remapped, _as_labels(gt), ignore, num_classes=num_gt)


def occupied_classes(
    labels: LabelVolume | np.ndarray,
    within: np.ndarray | None = None,
    min_fraction: float = 0.005,
) -> list[int]:
    """
    Classes covering more than min_fraction of the pixels selected by `within`.
    """

    values = _as_labels(labels)
    if within is not None:
        values = values[within]
    values = values.reshape(-1).astype(np.int64)
    if values.size == 0:
        return []
    fractions = np.bincount(values) / values.size
    return [int(c) for c in np.flatnonzero(fractions > min_fraction)]


def write_report(path: str | Path, payload: MetricReport | ClusterClassMatrix | dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload if isinstance(payload, dict) else payload.to_dict()
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2)
    return path
