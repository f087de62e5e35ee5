"""Confusion-count accumulation and the five evaluation measures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.tn + other.tn,
            self.fp + other.fp,
            self.fn + other.fn,
        )


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    oa: float
    iou: float
    degenerate: bool = False  # some ratio hit 0/0 and was reported as 0


def binarize(logits) -> np.ndarray:
    """Per-pixel class decision from (N, 2, H, W) logits.

    Ties go to class 0 (unchanged), so the comparison is strict.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 4 or data.shape[1] != 2:
        raise ShapeError(f"binarize expects (N,2,H,W) logits, got {data.shape}")
    return (data[:, 1] > data[:, 0]).astype(np.uint8)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Tally per-pixel agreement between two binary masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must contain only 0/1 values")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def metrics_from_confusion(c: ConfusionCounts) -> MetricReport:
    """precision, recall, F1, overall accuracy, and IoU.

    Any 0/0 ratio is reported as 0 and flags the report as degenerate.
    """
    if c.total == 0:
        raise ValueError("empty confusion: no pixels were evaluated")
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    if precision + recall > 0:
        f1, d3 = 2 * precision * recall / (precision + recall), False
    else:
        f1, d3 = 0.0, True
    oa = (c.tp + c.tn) / c.total
    iou, d4 = _ratio(c.tp, c.tp + c.fp + c.fn)
    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        oa=oa,
        iou=iou,
        degenerate=d1 or d2 or d3 or d4,
    )
