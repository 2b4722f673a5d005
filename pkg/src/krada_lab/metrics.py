"""Pixel-level IoU metrics and image-level detection metrics.

Classes are numbered ``1..K+1`` (the last is unknown); label 0 is void and
never scored. Classes that appear in neither ground truth nor prediction get
an IoU of NaN and are left out of the means.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class ConfusionAccumulator:
    """``(K+1) x (K+1)`` pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, K: int):
        self.K = K
        self.matrix = np.zeros((K + 1, K + 1), dtype=np.int64)

    def accumulate(self, gt, pred) -> "ConfusionAccumulator":
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ValueError(f"ground truth and prediction differ in size: {gt.size} vs {pred.size}")
        n = self.K + 1
        for name, arr in (("ground truth", gt), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() > n):
                raise ValueError(f"{name} labels must lie in 0..{n}")
        keep = gt > 0
        if pred[keep].size and pred[keep].min() < 1:
            raise ValueError("predictions for scored pixels must lie in 1..K+1")
        idx = (gt[keep].astype(np.int64) - 1) * n + (pred[keep].astype(np.int64) - 1)
        self.matrix += np.bincount(idx, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.K != self.K:
            raise ValueError("cannot merge accumulators with different K")
        out = ConfusionAccumulator(self.K)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def per_class_iou(matrix: np.ndarray) -> np.ndarray:
    tp = np.diag(matrix).astype(np.float64)
    denom = matrix.sum(axis=0) + matrix.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def aggregate_iou(ious) -> tuple[float, float]:
    """(mIoU over all classes, mIoU over all but the last class); NaNs skipped."""
    ious = np.asarray(ious, dtype=np.float64)
    known = ious[:-1]

    def mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if a.size else math.nan

    return mean(ious), mean(known)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    K: int
    iou: list[float] = field(default_factory=list)
    miou: float = math.nan
    miou_star: float = math.nan
    accuracy: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    undefined: tuple[str, ...] = ()

    @property
    def unknown_iou(self) -> float:
        return self.iou[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "value"])
        for c, v in enumerate(self.iou, 1):
            name = "unknown" if c == self.K + 1 else f"class_{c}"
            w.writerow([f"iou_{name}", _fmt(v)])
        w.writerow(["miou", _fmt(self.miou)])
        w.writerow(["miou_star", _fmt(self.miou_star)])
        return buf.getvalue()

    def to_instance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "value"])
        for key in ("accuracy", "precision", "recall", "f1"):
            w.writerow([key, _fmt(getattr(self, key))])
        for key in ("tp", "fp", "tn", "fn"):
            w.writerow([key, getattr(self, key)])
        w.writerow(["undefined", ";".join(self.undefined)])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table in percent, one decimal: per-class IoUs, then mIoU and mIoU*."""
        heads = [f"c{c}" for c in range(1, self.K + 1)] + ["unk.", "mIoU", "mIoU*"]
        vals = list(self.iou) + [self.miou, self.miou_star]
        cells = [("-" if math.isnan(v) else f"{100 * v:.1f}") for v in vals]
        width = max(6, *(len(h) for h in heads))
        return (" ".join(h.rjust(width) for h in heads) + "\n"
                + " ".join(c.rjust(width) for c in cells) + "\n")


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def iou_report(acc: ConfusionAccumulator) -> MetricReport:
    if acc.total == 0:
        raise ValueError("no scored pixels")
    ious = per_class_iou(acc.matrix)
    miou, miou_star = aggregate_iou(ious)
    return MetricReport(K=acc.K, iou=[float(v) for v in ious], miou=miou, miou_star=miou_star)


def image_level_report(per_image, tau: float = 0.001, n_pixels: int = 1,
                       report: MetricReport | None = None) -> MetricReport:
    """Accuracy/precision/recall/F1 of image-level unknown detection.

    ``per_image`` holds ``(has_unknown_gt, predicted_unknown_pixel_count)``; an
    image is flagged when its count exceeds ``tau * n_pixels``. When a ratio's
    denominator is zero it is 1.0 if its numerator's complement is also empty
    (nothing to find, nothing claimed) and 0.0 otherwise; such metrics are
    listed in ``undefined``.
    """
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    tp = fp = tn = fn = 0
    for has_unknown, count in per_image:
        flagged = count > tau * n_pixels
        if has_unknown and flagged:
            tp += 1
        elif has_unknown:
            fn += 1
        elif flagged:
            fp += 1
        else:
            tn += 1
    total = tp + fp + tn + fn
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
        undefined.append("recall")
    out = report if report is not None else MetricReport(K=0)
    out.accuracy = (tp + tn) / total if total else math.nan
    out.precision, out.recall = precision, recall
    out.f1 = f1_score(precision, recall)
    out.tp, out.fp, out.tn, out.fn = tp, fp, tn, fn
    out.undefined = tuple(undefined)
    return out
