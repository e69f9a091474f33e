"""Confusion matrices, IoU aggregation and the inter-class overlap statistic."""

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ClassAbsentError, EmptySubsetError, ShapeMismatchError
from .validation import IGNORE


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; IGNORE ground truth is only counted."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, n_classes):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64), 0)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored

    def accumulate(self, predictions, ground_truth):
        return accumulate(self, predictions, ground_truth)

    def merge(self, other):
        if other.counts.shape != self.counts.shape:
            raise ShapeMismatchError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm, predictions, ground_truth):
    """Return a new matrix with ``counts[gt, pred]`` incremented per non-IGNORE point."""
    pred = np.asarray(predictions, dtype=np.int64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ShapeMismatchError(f"predictions {pred.shape} and ground truth {gt.shape} must be aligned 1-D arrays")
    c = cm.n_classes
    keep = gt != IGNORE
    if np.any((gt[keep] < 0) | (gt[keep] >= c)) or np.any((pred[keep] < 0) | (pred[keep] >= c)):
        raise ValueError(f"labels must lie in 0..{c - 1} (or IGNORE in the ground truth)")
    flat = np.bincount(gt[keep] * c + pred[keep], minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + flat, cm.ignored + int((~keep).sum()))


def iou_per_class(cm):
    """IoU per class, NaN where TP + FP + FN is zero."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm, class_subset):
    """Per-class IoU (None when absent) and their mean over ``class_subset``.

    Classes absent from both predictions and ground truth are left out of
    the mean; an all-absent subset has mean NaN.
    """
    subset = [int(c) for c in class_subset]
    if not subset:
        raise EmptySubsetError("class subset is empty")
    ious = iou_per_class(cm)
    per_class = [None if np.isnan(ious[c]) else float(ious[c]) for c in subset]
    present = [v for v in per_class if v is not None]
    mean = float(np.mean(present)) if present else float("nan")
    return per_class, mean


def combine_means(means, counts):
    """Count-weighted mean of group means, e.g. base and novel mIoU into the overall mIoU."""
    means = np.asarray(means, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    return float((means * counts).sum() / counts.sum())


def overlap_degree(cloud, class_a, class_b, radius=0.1):
    """Fraction of class-a points within ``radius`` of some class-b point (directional)."""
    labels = cloud.labels
    pa = cloud.positions[labels == class_a]
    pb = cloud.positions[labels == class_b]
    if len(pa) == 0:
        raise ClassAbsentError(class_a)
    if len(pb) == 0:
        raise ClassAbsentError(class_b)
    dist, _ = cKDTree(pb).query(pa, k=1)
    return float(np.count_nonzero(dist <= radius)) / len(pa)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100.0 * v:.4f}"


def report_rows(cm, base_classes, novel_classes, class_names=None):
    """Rows ``(kind, class, IoU%)``: one per class, then base/novel/all summaries."""
    all_classes = list(base_classes) + list(novel_classes)
    per_class, all_mean = miou(cm, all_classes)
    rows = []
    for c, v in zip(all_classes, per_class):
        name = class_names[c] if class_names is not None else str(c)
        rows.append(("class", name, _fmt(v)))
    rows.append(("summary", "base", _fmt(miou(cm, base_classes)[1]) if base_classes else ""))
    rows.append(("summary", "novel", _fmt(miou(cm, novel_classes)[1]) if novel_classes else ""))
    rows.append(("summary", "all", _fmt(all_mean)))
    return rows


def report_csv(cm, base_classes, novel_classes, class_names=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "class", "iou"])
    writer.writerows(report_rows(cm, base_classes, novel_classes, class_names))
    return buf.getvalue()
