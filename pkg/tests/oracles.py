"""Slow, literal reference implementations used only by the tests.

Each oracle is written from the definition (pair counts, threshold sweeps,
double loops) and shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


# --- ranking metrics ---------------------------------------------------------

def auroc_pairs(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def sweep(scores, labels):
    """(TP, FP) at every distinct threshold, strictest first, with ``score >= t``."""
    out = []
    for t in sorted(set(float(s) for s in scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        out.append((tp, fp))
    return out


def auprc_sweep(scores, labels) -> float:
    n_pos = sum(1 for y in labels if y)
    total, prev_recall = 0.0, 0.0
    for tp, fp in sweep(scores, labels):
        recall = tp / n_pos
        precision = tp / (tp + fp)
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def fpr95_sweep(scores, labels, level: float = 0.95) -> float:
    n_pos = sum(1 for y in labels if y)
    n_neg = len(labels) - n_pos
    if n_neg == 0:
        return 0.0
    return min(fp / n_neg for tp, fp in sweep(scores, labels) if tp / n_pos >= level)


def f1_sweep(scores, labels) -> float:
    n_pos = sum(1 for y in labels if y)
    best = 0.0
    for tp, fp in sweep(scores, labels):
        if tp == 0:
            continue
        p, r = tp / (tp + fp), tp / n_pos
        best = max(best, 2 * p * r / (p + r))
    return best


def miou_loops(pred, gt, num_classes: int, ignore_label: int | None = 255) -> float:
    pred = np.asarray(pred).ravel().tolist()
    gt = np.asarray(gt).ravel().tolist()
    ious = []
    for c in range(1, num_classes + 1):
        tp = fp = fn = 0
        for p, g in zip(pred, gt):
            if g == ignore_label or not 1 <= g <= num_classes:
                continue
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


# --- contrastive loss --------------------------------------------------------

def corocl_double_loop(a_vecs, a_cls, a_ids, c_vecs, c_cls, c_ids, tau: float) -> float:
    """Literal pair loop: mean over (anchor, positive) of -log(e^pos / (e^pos + sum e^neg)).

    Rows with equal ids are the same pixel; a pixel is never its own positive.
    Anchors without negatives contribute zero for every pair.
    """
    terms = []
    for i in range(len(a_vecs)):
        negs = [j for j in range(len(c_vecs)) if c_cls[j] != a_cls[i]]
        for p in range(len(c_vecs)):
            if c_cls[p] != a_cls[i] or c_ids[p] == a_ids[i]:
                continue
            sp = math.exp(float(np.dot(a_vecs[i], c_vecs[p])) / tau)
            sn = sum(math.exp(float(np.dot(a_vecs[i], c_vecs[n])) / tau) for n in negs)
            terms.append(-math.log(sp / (sp + sn)) if negs else 0.0)
    return sum(terms) / len(terms) if terms else 0.0


# --- smoothing ---------------------------------------------------------------

def gaussian_kernel2d(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    k = np.array(
        [[math.exp(-(i * i + j * j) / (2 * sigma * sigma)) for j in range(-r, r + 1)] for i in range(-r, r + 1)]
    )
    return k / k.sum()


# --- finite differences ------------------------------------------------------

def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(np.ravel(numeric)), np.linalg.norm(np.ravel(analytic)), 1e-12)
    return float(num / den)
