"""Confusion-matrix accumulation and per-class IoU / accuracy / F1."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import IGNORE_INDEX


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()

    def accumulate(self, pred, target, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = torch.as_tensor(pred).reshape(-1).long()
        target = torch.as_tensor(target).reshape(-1).long()
        if pred.shape != target.shape:
            raise ValueError("prediction and target sizes differ")
        keep = target != ignore_index
        pred, target = pred[keep], target[keep]
        k = self.num_classes
        if pred.numel() and (min(pred.min(), target.min()) < 0 or max(pred.max(), target.max()) >= k):
            raise ValueError(f"class index outside 0..{k - 1}")
        flat = torch.bincount(target * k + pred, minlength=k * k)
        self.counts += flat.reshape(k, k).numpy()
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, target, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return ConfusionMatrix(cm.num_classes, cm.counts).accumulate(pred, target, ignore_index)


def _ratio(num, den):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


@dataclass
class SegMetrics:
    iou: np.ndarray
    acc: np.ndarray
    f1: np.ndarray
    present: np.ndarray  # class appears in the ground truth
    miou: float
    macc: float
    mf1: float

    def summary(self) -> str:
        return f"mIoU={self.miou:.4f} mAcc={self.macc:.4f} F1={self.mf1:.4f}"


def metrics(cm: ConfusionMatrix) -> SegMetrics:
    """Per-class scores; means run over classes present in the ground truth.

    Classes absent from both ground truth and prediction get NaN scores.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(0) - tp
    fn = c.sum(1) - tp
    iou = _ratio(tp, tp + fp + fn)
    acc = _ratio(tp, tp + fn)
    precision = np.nan_to_num(_ratio(tp, tp + fp))
    recall = np.nan_to_num(_ratio(tp, tp + fn))
    f1 = _ratio(2 * precision * recall, precision + recall)
    seen = (tp + fp + fn) > 0
    f1 = np.where(seen, np.nan_to_num(f1), np.nan)
    present = (tp + fn) > 0

    def mean(v):
        return float(np.mean(v[present])) if present.any() else math.nan

    return SegMetrics(iou, acc, f1, present, mean(iou), mean(acc), mean(f1))


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(float(v), 6)


def metrics_records(m: SegMetrics, class_names: Sequence[str] | None = None) -> list[dict]:
    """One record per class plus a final ``"mean"`` record."""
    names = list(class_names) if class_names else [f"class_{i}" for i in range(len(m.iou))]
    rows = [{"class": names[i], "iou": _num(m.iou[i]), "acc": _num(m.acc[i]), "f1": _num(m.f1[i]),
             "present": bool(m.present[i])} for i in range(len(m.iou))]
    rows.append({"class": "mean", "iou": _num(m.miou), "acc": _num(m.macc), "f1": _num(m.mf1),
                 "present": True})
    return rows


def write_report(path: str | Path, m: SegMetrics, cm: ConfusionMatrix,
                 class_names: Sequence[str] | None = None, extra: dict | None = None):
    """JSON report: ``{"classes": [...records], "confusion": [[...]], ...extra}``."""
    report = {"classes": metrics_records(m, class_names), "confusion": cm.counts.tolist()}
    report.update(extra or {})
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
    return report
