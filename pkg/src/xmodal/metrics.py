"""Task metrics, all oriented lower-is-better."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricResult:
    name: str
    value: float
    count: int
    degenerate_labels: int = 0


def _pair(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, true


def zero_one_error(pred, true) -> MetricResult:
    pred, true = _pair(pred, true)
    return MetricResult("0-1 error", float(np.mean(pred != true)), int(pred.size))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties counted one half. Needs both classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    r = (starts + (counts + 1) / 2.0)[inverse]
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def one_minus_auroc(scores, labels) -> MetricResult:
    """1 - macro AUROC over labels that have both positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    if scores.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    per = []
    skipped = 0
    for j in range(scores.shape[1]):
        col = labels[:, j].astype(bool)
        if col.all() or not col.any():
            skipped += 1
            continue
        per.append(auroc(scores[:, j], col))
    if not per:
        raise ValueError("every label is degenerate (all positive or all negative)")
    return MetricResult("1 - AUROC", 1.0 - float(np.mean(per)), int(scores.shape[0]), skipped)


def one_minus_f1(pred, true, num_classes: int) -> MetricResult:
    """1 - macro F1; a class with P + R = 0 scores F1 = 0."""
    pred, true = _pair(pred, true)
    f1s = []
    for k in range(num_classes):
        tp = np.sum((pred == k) & (true == k))
        fp = np.sum((pred == k) & (true != k))
        fn = np.sum((pred != k) & (true == k))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return MetricResult("1 - F1", 1.0 - float(np.mean(f1s)), int(pred.size))


def relative_l2(pred, target) -> MetricResult:
    """Mean over samples of ||pred - target|| / ||target||."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty input")
    n = pred.shape[0]
    num = np.linalg.norm((pred - target).reshape(n, -1), axis=1)
    den = np.linalg.norm(target.reshape(n, -1), axis=1)
    if np.any(den == 0):
        raise ValueError("target sample with zero norm")
    return MetricResult("relative l2", float(np.mean(num / den)), n)


METRIC_LABELS = {
    "zero_one": "0-1 error (↓)",
    "f1": "1 - F1 (↓)",
    "auroc": "1 - AUROC (↓)",
    "relative_l2": "relative l2 (↓)",
}


def evaluate(metric: str, outputs, targets, num_classes: int | None = None) -> MetricResult:
    """Dispatch on the task's metric name given raw model outputs."""
    outputs = np.asarray(outputs)
    if metric == "zero_one":
        return zero_one_error(outputs.argmax(axis=1), targets)
    if metric == "f1":
        return one_minus_f1(outputs.argmax(axis=1), targets, num_classes or outputs.shape[1])
    if metric == "auroc":
        return one_minus_auroc(outputs, targets)
    if metric == "relative_l2":
        return relative_l2(outputs, targets)
    raise ValueError(f"unknown metric {metric!r}")
