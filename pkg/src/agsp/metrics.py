"""Confusion-matrix based per-class IoU and mean IoU."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


class MetricsAccumulator:
    """Pixel confusion counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, y, valid=None) -> "MetricsAccumulator":
        pred = np.asarray(pred)
        y = np.asarray(y)
        if pred.shape != y.shape:
            raise MetricsError(f"prediction {pred.shape} and labels {y.shape} differ in shape")
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != y.shape:
                raise MetricsError("valid mask shape differs from labels")
            pred, y = pred[valid], y[valid]
        k = self.num_classes
        for name, v in (("label", y), ("prediction", pred)):
            if v.size and (v.min() < 0 or v.max() >= k):
                raise MetricsError(f"{name} out of range for {k} classes")
        self.confusion += np.bincount(y.ravel().astype(np.int64) * k + pred.ravel(),
                                      minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        out = MetricsAccumulator(self.num_classes)
        out.confusion = self.confusion + other.confusion
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class is absent from both prediction and labels."""
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(0) + self.confusion.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self, strict: bool = False):
        """Return ``(per_class_iou, miou)``.

        Zero-union classes are left out of the mean unless ``strict``, which
        scores them 0.
        """
        iou = self.iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise MetricsError("empty evaluation: every class has zero union")
        if strict:
            return iou, float(np.nan_to_num(iou).mean())
        return iou, float(iou[present].mean())


def accumulate(acc: MetricsAccumulator, pred, y, valid=None) -> MetricsAccumulator:
    return acc.accumulate(pred, y, valid)


def miou(acc: MetricsAccumulator, strict: bool = False):
    return acc.miou(strict)


def format_table(names: Sequence[str], iou: np.ndarray, miou_value: float, title: str = "Model") -> str:
    """Aligned text table: one IoU column per class (percent) and a final mIoU column."""
    header = ["Method"] + list(names) + ["mIoU"]
    cells = [title] + ["-" if np.isnan(v) else f"{100 * v:.2f}" for v in iou] + [f"{100 * miou_value:.2f}"]
    widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
    line = lambda row: " | ".join(s.rjust(w) if i else s.ljust(w) for i, (s, w) in enumerate(zip(row, widths)))
    return "\n".join([line(header), "-+-".join("-" * w for w in widths), line(cells)])
