"""Segmentation metrics: per-class IoU/mIoU and pixelwise precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ShapeError


def confusion_matrix(pred, gt, n: int) -> np.ndarray:
    """(n, n) counts with ground truth on rows and predictions on columns."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    if pred.min() < 0 or pred.max() >= n or gt.min() < 0 or gt.max() >= n:
        raise ShapeError(f"labels must lie in 0..{n - 1}")
    flat = gt.reshape(-1) * n + pred.reshape(-1)
    return np.bincount(flat, minlength=n * n).reshape(n, n)


def iou_from_confusion(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both prediction and ground truth are excluded from
    the mean (their IoU is NaN); classes predicted but absent from ground
    truth count with IoU 0.
    """
    n = cm.shape[0]
    iou = np.full(n, np.nan)
    for k in range(n):
        inter = cm[k, k]
        union = cm[k, :].sum() + cm[:, k].sum() - inter
        if union > 0:
            iou[k] = inter / union
    included = ~np.isnan(iou)
    miou = float(iou[included].mean()) if included.any() else float("nan")
    return iou, miou


def compute_miou(pred, gt, n: int) -> Tuple[np.ndarray, float]:
    """IoU_k = |pred=k and gt=k| / |pred=k or gt=k|, plus the mean as above."""
    return iou_from_confusion(confusion_matrix(pred, gt, n))


@dataclass
class F1Score:
    precision: float
    recall: float
    f1: float
    vacuous: bool  # class absent from both prediction and ground truth


def f1_from_confusion(cm: np.ndarray, k: int) -> F1Score:
    tp = int(cm[k, k])
    fp = int(cm[:, k].sum() - tp)
    fn = int(cm[k, :].sum() - tp)
    if tp + fp + fn == 0:
        # nothing to find and nothing found: vacuously correct
        return F1Score(precision=1.0, recall=1.0, f1=1.0, vacuous=True)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return F1Score(precision=precision, recall=recall, f1=0.0, vacuous=False)
    f1 = 2.0 * precision * recall / (precision + recall)
    return F1Score(precision=precision, recall=recall, f1=f1, vacuous=False)


def compute_f1(pred, gt, k: int) -> F1Score:
    """Pixelwise TP/FP/FN for class k; F1 = 0 when precision + recall = 0."""
    n = max(int(np.asarray(pred).max()), int(np.asarray(gt).max()), k) + 1
    return f1_from_confusion(confusion_matrix(pred, gt, n), k)
