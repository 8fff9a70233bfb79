"""Segmentation metrics from a ground-truth-by-prediction confusion matrix.

Conventions: mean IoU averages over classes present in ground truth or
prediction (classes absent from both are excluded); precision is 0
when a class is never predicted; precision/recall/F-1 averages run
over foreground classes only, and foreground accuracy scores the
ground-truth foreground pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray      # (L, L); rows ground truth, cols prediction

    @property
    def label_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred: np.ndarray, gt: np.ndarray, labels: int) -> ConfusionMatrix:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth sizes differ")
    if pred.size and (pred.min() < 0 or pred.max() >= labels or
                      gt.min() < 0 or gt.max() >= labels):
        raise ValueError(f"labels out of range [0, {labels})")
    idx = gt * labels + pred
    counts = np.bincount(idx, minlength=labels * labels)
    return ConfusionMatrix(counts.reshape(labels, labels))


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU = TP / (TP + FP + FN) and the mean over classes
    present in ground truth or prediction."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - tp
    present = denom > 0
    per_class = np.zeros(cm.label_count)
    per_class[present] = tp[present] / denom[present]
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return per_class, mean


def prf1(cm: ConfusionMatrix, background: int = 0):
    """Per-class precision/recall/F-1 with their foreground-class
    averages, plus overall pixel accuracy and foreground accuracy."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    gt_tot = c.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp),
                          where=pred_tot > 0)
    recall = np.divide(tp, gt_tot, out=np.zeros_like(tp), where=gt_tot > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp),
                   where=pr > 0)
    fg = np.arange(cm.label_count) != background
    accuracy = float(tp.sum() / c.sum()) if c.sum() else 0.0
    fg_gt = gt_tot[fg].sum()
    fg_accuracy = float(tp[fg].sum() / fg_gt) if fg_gt else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "avg_precision": float(precision[fg].mean()),
        "avg_recall": float(recall[fg].mean()),
        "avg_f1": float(f1[fg].mean()),
        "accuracy": accuracy,
        "fg_accuracy": fg_accuracy,
    }


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray
    mean_iou: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    avg_precision: float
    avg_recall: float
    avg_f1: float
    accuracy: float
    fg_accuracy: float


def report(cm: ConfusionMatrix, background: int = 0) -> MetricsReport:
    per_class, mean = iou(cm)
    stats = prf1(cm, background)
    return MetricsReport(per_class_iou=per_class, mean_iou=mean,
                         precision=stats["precision"],
                         recall=stats["recall"], f1=stats["f1"],
                         avg_precision=stats["avg_precision"],
                         avg_recall=stats["avg_recall"],
                         avg_f1=stats["avg_f1"],
                         accuracy=stats["accuracy"],
                         fg_accuracy=stats["fg_accuracy"])


def report_csv(rep: MetricsReport, class_names: list[str] | None = None) -> str:
    n = rep.per_class_iou.size
    names = class_names or [f"class{i}" for i in range(n)]
    lines = ["class,iou,precision,recall,f1"]
    for i in range(n):
        lines.append(f"{names[i]},{rep.per_class_iou[i]:.6f},"
                     f"{rep.precision[i]:.6f},{rep.recall[i]:.6f},"
                     f"{rep.f1[i]:.6f}")
    lines.append(f"mean_iou,{rep.mean_iou:.6f},,,")
    lines.append(f"accuracy,{rep.accuracy:.6f},,,")
    lines.append(f"fg_accuracy,{rep.fg_accuracy:.6f},,,")
    lines.append(f"avg_precision,{rep.avg_precision:.6f},,,")
    lines.append(f"avg_recall,{rep.avg_recall:.6f},,,")
    lines.append(f"avg_f1,{rep.avg_f1:.6f},,,")
    return "\n".join(lines) + "\n"


def report_table(rep: MetricsReport,
                 class_names: list[str] | None = None) -> str:
    n = rep.per_class_iou.size
    names = class_names or [f"class{i}" for i in range(n)]
    width = max(len(s) for s in names + ["class"])
    lines = [f"{'class':<{width}}  {'IoU':>7} {'prec':>7} {'rec':>7} {'F1':>7}"]
    for i in range(n):
        lines.append(f"{names[i]:<{width}}  {rep.per_class_iou[i]:7.4f} "
                     f"{rep.precision[i]:7.4f} {rep.recall[i]:7.4f} "
                     f"{rep.f1[i]:7.4f}")
    lines.append("-" * len(lines[0]))
    lines.append(f"mean IoU      {rep.mean_iou:.4f}")
    lines.append(f"accuracy      {rep.accuracy:.4f}")
    lines.append(f"fg accuracy   {rep.fg_accuracy:.4f}")
    lines.append(f"avg precision {rep.avg_precision:.4f}")
    lines.append(f"avg recall    {rep.avg_recall:.4f}")
    lines.append(f"avg F1        {rep.avg_f1:.4f}")
    return "\n".join(lines) + "\n"
