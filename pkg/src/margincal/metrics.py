"""Confusion-matrix accumulation and dataset-global IoU evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import LabelMask, ShapeError


class EmptyMatrixError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Pixel counts with rows = ground truth and columns = prediction.

    Matrices are single-writer; combine partial results with :meth:`merge`.
    """

    classes: int
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.classes, self.classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.classes, self.classes):
                raise ShapeError(f"counts must be {self.classes}x{self.classes}")
            if np.any(self.counts < 0):
                raise ValueError("negative confusion count")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ShapeError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.classes, self.counts.copy())


def _as_labels(x) -> np.ndarray:
    if isinstance(x, LabelMask):
        return x.flat()
    a = np.asarray(x).reshape(-1)
    if a.size == 0:
        return a.astype(np.int64)
    if a.dtype.kind not in "iub":
        raise ValueError(f"labels must be integers, got dtype {a.dtype}")
    return a


def accumulate(cm: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (gt, pred) pair.

    ``gt``/``pred`` may be :class:`LabelMask` objects or integer arrays.
    """
    g = _as_labels(gt)
    p = _as_labels(pred)
    if g.shape != p.shape:
        raise ShapeError(f"gt has {g.size} pixels, prediction has {p.size}")
    for m in (gt, pred):
        if isinstance(m, LabelMask) and m.classes != cm.classes:
            raise ShapeError(f"mask has {m.classes} classes, matrix has {cm.classes}")
    c = cm.classes
    if g.size and (g.max() >= c or p.max() >= c or g.min() < 0 or p.min() < 0):
        raise ValueError("label outside [0, classes)")
    counts = np.bincount(g.astype(np.int64) * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, cm.counts + counts)


def confusion_matrix(gt, pred, classes: int) -> ConfusionMatrix:
    return accumulate(ConfusionMatrix(classes), gt, pred)


def iou(cm: ConfusionMatrix, k: int) -> float:
    """Intersection over union for class ``k``, with 0/0 taken as 1."""
    if not 0 <= k < cm.classes:
        raise IndexError(f"class {k} out of range")
    inter = cm.counts[k, k]
    union = cm.counts[k, :].sum() + cm.counts[:, k].sum() - inter
    if union == 0:
        return 1.0
    return float(inter / union)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    return np.array([iou(cm, k) for k in range(cm.classes)])


@dataclass(frozen=True)
class MetricReport:
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    per_class_presence: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "iou", "present"])
        for k, (v, present) in enumerate(zip(self.per_class_iou, self.per_class_presence)):
            w.writerow([k, repr(float(v)), int(present)])
        w.writerow(["miou", repr(self.miou), ""])
        w.writerow(["pixel_accuracy", repr(self.pixel_accuracy), ""])
        return buf.getvalue()


def report(cm: ConfusionMatrix, present_only: bool = False) -> MetricReport:
    """Summarize a confusion matrix.

    mIoU is the plain mean over all classes; classes absent from both ground
    truth and prediction count as IoU 1. ``present_only=True`` averages only
    over classes that were observed or predicted at least once.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrixError("confusion matrix is empty")
    ious = per_class_iou(cm)
    presence = (cm.counts.sum(axis=0) + cm.counts.sum(axis=1)) > 0
    if present_only and presence.any():
        miou = float(ious[presence].mean())
    else:
        miou = float(ious.mean())
    return MetricReport(
        per_class_iou=ious,
        miou=miou,
        pixel_accuracy=float(np.trace(cm.counts) / total),
        per_class_presence=presence,
    )
