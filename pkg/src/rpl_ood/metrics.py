"""Pixel-level anomaly metrics and closed-set mIoU.

Higher score means more anomalous; label 1 marks a true outlier pixel.
Threshold sweeps are tie-inclusive (``score >= threshold`` predicts outlier).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, UndefinedMetricError


@dataclass
class ScoredPixels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise InputError("scores and labels differ in length")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.labels).sum())


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    fpr95: float
    f1_star: float
    miou: float | None = None
    n_pixels: int = 0
    n_outlier: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _require_positives(sp: ScoredPixels) -> None:
    if sp.n_pos == 0:
        raise UndefinedMetricError("no positive (outlier) pixels")


def _curve(sp: ScoredPixels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative TP/FP counts at each distinct threshold, strictest first."""
    order = np.argsort(-sp.scores, kind="mergesort")
    s = sp.scores[order]
    y = sp.labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    return tp.astype(np.float64), fp.astype(np.float64), s[last_of_group]


def auroc(sp: ScoredPixels) -> float:
    """Mann-Whitney U statistic with midranks for ties."""
    if sp.n_pos == 0 or sp.n_neg == 0:
        raise UndefinedMetricError("AuROC needs both classes")
    order = np.argsort(sp.scores, kind="mergesort")
    s = sp.scores[order]
    ranks = np.empty(len(s), dtype=np.float64)
    starts = np.r_[0, np.flatnonzero(np.diff(s)) + 1]
    ends = np.r_[starts[1:], len(s)]
    for_each = (starts + ends - 1) / 2.0 + 1.0  # midrank per tie group
    ranks[order] = np.repeat(for_each, ends - starts)
    n_pos, n_neg = sp.n_pos, sp.n_neg
    u = ranks[sp.labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(sp: ScoredPixels) -> float:
    """Step-wise sum of precision times recall increments."""
    _require_positives(sp)
    tp, fp, _ = _curve(sp)
    precision = tp / (tp + fp)
    recall = tp / sp.n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def fpr_at_95tpr(sp: ScoredPixels, tpr_level: float = 0.95) -> float:
    """Lowest FPR among thresholds whose TPR reaches ``tpr_level``."""
    _require_positives(sp)
    if sp.n_neg == 0:
        return 0.0
    tp, fp, _ = _curve(sp)
    tpr = tp / sp.n_pos
    idx = int(np.argmax(tpr >= tpr_level))
    return float(fp[idx] / sp.n_neg)


def f1_star(sp: ScoredPixels) -> float:
    _require_positives(sp)
    tp, fp, _ = _curve(sp)
    precision = tp / (tp + fp)
    recall = tp / sp.n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``cm[g, p]`` counts for labels 1..C plus per-class misses to out-of-range predictions.

    Ground-truth pixels outside 1..C or equal to ``ignore_label`` are dropped.
    """
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise InputError("prediction and ground truth differ in size")
    keep = (gt >= 1) & (gt <= num_classes)
    if ignore_label is not None:
        keep &= gt != ignore_label
    idx = (gt[keep] - 1) * num_classes + np.clip(pred[keep] - 1, 0, num_classes - 1)
    ok = (pred[keep] >= 1) & (pred[keep] <= num_classes)
    cm = np.bincount(idx[ok], minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    # predictions outside 1..C count as false negatives only
    fn_extra = np.bincount(gt[keep][~ok] - 1, minlength=num_classes)
    return cm, fn_extra


def miou(pred_map: np.ndarray, gt_map: np.ndarray, num_classes: int, ignore_label: int | None = 255) -> float:
    cm, fn_extra = confusion_matrix(pred_map, gt_map, num_classes, ignore_label)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp + fn_extra
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise UndefinedMetricError("no class present in prediction or ground truth")
    return float(np.mean(tp[present] / denom[present]))


def anomaly_report(sp: ScoredPixels, miou_value: float | None = None) -> MetricsReport:
    return MetricsReport(
        auroc=auroc(sp),
        auprc=auprc(sp),
        fpr95=fpr_at_95tpr(sp),
        f1_star=f1_star(sp),
        miou=miou_value,
        n_pixels=len(sp.scores),
        n_outlier=sp.n_pos,
    )


def standardized_mean_difference(inlier: np.ndarray, outlier: np.ndarray) -> float:
    """(mean_out - mean_in) / pooled standard deviation."""
    inlier = np.asarray(inlier, dtype=np.float64)
    outlier = np.asarray(outlier, dtype=np.float64)
    pooled = np.sqrt((inlier.var() + outlier.var()) / 2.0)
    if pooled == 0:
        return float("inf") if outlier.mean() != inlier.mean() else 0.0
    return float((outlier.mean() - inlier.mean()) / pooled)
