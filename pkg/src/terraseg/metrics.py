"""Evaluation metrics derived from a class-by-class confusion matrix.

Every metric reads off the same K x K pixel-count table: entry [g][p]
counts pixels of ground-truth class g predicted as p. Per-class scores
for classes absent from the relevant counts are "undefined" (None) and
are skipped by the mean aggregations.

Per-class "pixel accuracy" is reported as recall TP/(TP+FN) by default;
the TN-inclusive variant (TP+TN)/total is also available, but for rare
classes it is dominated by true negatives and approaches 1 regardless of
segmentation quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .data import ClassSet
from .errors import DataError


class ConfusionMatrix:
    """K x K pixel-count table; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray, ignore: Iterable[int] = ()) -> "ConfusionMatrix":
        """Accumulate one prediction/ground-truth pair, skipping ignored GT classes."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"mask shapes differ: prediction {pred.shape} vs ground truth {gt.shape}")
        keep = np.ones(gt.shape, dtype=bool)
        for c in ignore:
            keep &= gt != c
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= self.num_classes or p.min() < 0 or p.max() >= self.num_classes):
            raise DataError(f"mask values outside [0, {self.num_classes})")
        flat = np.bincount(g * self.num_classes + p, minlength=self.num_classes**2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c, :].sum() - self.counts[c, c])

    def tn(self, c: int) -> int:
        return self.total - self.tp(c) - self.fp(c) - self.fn(c)


def dice_coefficient(conf: ConfusionMatrix, c: int) -> Optional[float]:
    """2TP / (2TP + FP + FN); None when the class is absent from both masks."""
    tp, fp, fn = conf.tp(c), conf.fp(c), conf.fn(c)
    denom = 2 * tp + fp + fn
    return None if denom == 0 else 2 * tp / denom


def iou(conf: ConfusionMatrix, c: int) -> Optional[float]:
    """Jaccard index TP / (TP + FP + FN); None when undefined."""
    tp, fp, fn = conf.tp(c), conf.fp(c), conf.fn(c)
    denom = tp + fp + fn
    return None if denom == 0 else tp / denom


def pixel_accuracy(conf: ConfusionMatrix, c: int) -> Optional[float]:
    """TN-inclusive per-class accuracy (TP+TN)/(TP+TN+FP+FN)."""
    if conf.total == 0:
        return None
    return (conf.tp(c) + conf.tn(c)) / conf.total


def class_recall(conf: ConfusionMatrix, c: int) -> Optional[float]:
    """TP / (TP + FN); None when the class never occurs in the ground truth."""
    row = conf.tp(c) + conf.fn(c)
    return None if row == 0 else conf.tp(c) / row


def total_pa(conf: ConfusionMatrix, excluded: Iterable[int] = ()) -> Optional[float]:
    """Fraction of correctly classified pixels over non-excluded GT classes."""
    excluded = set(excluded)
    keep = [c for c in range(conf.num_classes) if c not in excluded]
    total = int(conf.counts[keep, :].sum())
    if total == 0:
        return None
    correct = int(conf.counts.diagonal()[keep].sum())
    return correct / total


def _mean_over_classes(conf: ConfusionMatrix, excluded: Iterable[int], metric) -> Optional[float]:
    excluded = set(excluded)
    values = [metric(conf, c) for c in range(conf.num_classes) if c not in excluded]
    defined = [v for v in values if v is not None]
    return None if not defined else float(np.mean(defined))


def mean_pa(conf: ConfusionMatrix, excluded: Iterable[int] = (), tn_inclusive: bool = False) -> Optional[float]:
    metric = pixel_accuracy if tn_inclusive else class_recall
    return _mean_over_classes(conf, excluded, metric)


def mean_iou(conf: ConfusionMatrix, excluded: Iterable[int] = ()) -> Optional[float]:
    return _mean_over_classes(conf, excluded, iou)


def mean_dice(conf: ConfusionMatrix, excluded: Iterable[int] = ()) -> Optional[float]:
    return _mean_over_classes(conf, excluded, dice_coefficient)


@dataclass
class MetricsReport:
    """Per-class accuracies plus the three headline averages."""

    class_names: tuple
    per_class_pa: tuple
    total_pa: Optional[float]
    mean_pa: Optional[float]
    mean_iou: Optional[float]
    mean_dice: Optional[float]
    excluded_classes: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "per_class_pa": {name: value for name, value in zip(self.class_names, self.per_class_pa)},
            "total_pa": self.total_pa,
            "mean_pa": self.mean_pa,
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "excluded_classes": list(self.excluded_classes),
        }


def build_report(conf: ConfusionMatrix, class_set: ClassSet, exclude_void: bool = True,
                 tn_inclusive_pa: bool = False, ignore_void_pixels: bool = False) -> MetricsReport:
    """Assemble the standard report.

    ``exclude_void`` drops the void class from the mean aggregations;
    ``ignore_void_pixels`` additionally removes void ground-truth pixels
    from the total accuracy.
    """
    excluded = (class_set.void_index,) if exclude_void else ()
    per_class = pixel_accuracy if tn_inclusive_pa else class_recall
    total_excluded = excluded if ignore_void_pixels else ()
    return MetricsReport(
        class_names=tuple(class_set.names),
        per_class_pa=tuple(per_class(conf, c) for c in range(conf.num_classes)),
        total_pa=total_pa(conf, total_excluded),
        mean_pa=mean_pa(conf, excluded, tn_inclusive=tn_inclusive_pa),
        mean_iou=mean_iou(conf, excluded),
        mean_dice=mean_dice(conf, excluded),
        excluded_classes=excluded,
    )


def _fmt(value: Optional[float]) -> str:
    return "  n/a" if value is None else f"{100.0 * value:.2f}"


def render_table(report: MetricsReport) -> str:
    """Text table: one per-class accuracy column per class, then the averages."""
    width = max(8, max(len(n) for n in report.class_names) + 1)
    header = "".join(f"{name:>{width}}" for name in report.class_names)
    values = "".join(f"{_fmt(v):>{width}}" for v in report.per_class_pa)
    avg_header = f"{'Total PA':>10}{'Mean PA':>10}{'Mean IoU':>10}{'Mean Dice':>11}"
    avg_values = f"{_fmt(report.total_pa):>10}{_fmt(report.mean_pa):>10}{_fmt(report.mean_iou):>10}{_fmt(report.mean_dice):>11}"
    lines = [
        "Class Pixel Accuracy (%)",
        header,
        values,
        "",
        "Average Metrics (%)" + (f"   [means exclude: {', '.join(report.class_names[c] for c in report.excluded_classes)}]"
                                  if report.excluded_classes else ""),
        avg_header,
        avg_values,
    ]
    return "\n".join(lines)
