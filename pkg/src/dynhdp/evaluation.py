"""ROC analysis for abnormality scores.

The positive class is "abnormal" and a document is predicted abnormal when
its score is strictly below the threshold, so low scores rank as positive.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


def _clean(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    keep = ~np.isnan(scores)
    return scores[keep], labels[keep].astype(int), int((~keep).sum())


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    """``(TP, FP, TN, FN)`` at ``threshold``; NaN scores are ignored."""
    scores, labels, _ = _clean(scores, labels)
    pred = scores < threshold
    pos = labels == 1
    return (int((pred & pos).sum()), int((pred & ~pos).sum()),
            int((~pred & ~pos).sum()), int((~pred & pos).sum()))


def _roc_counts(scores, labels):
    """Cumulative (FP, TP) counts as the threshold sweeps upward through the
    distinct scores; tied scores enter together."""
    order = np.argsort(scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct, start = np.unique(s, return_index=True)
    group = np.add.reduceat(y, start) if len(s) else np.zeros(0, int)
    size = np.diff(np.append(start, len(s)))
    tp = np.concatenate([[0], np.cumsum(group)])
    fp = np.concatenate([[0], np.cumsum(size - group)])
    return distinct, fp, tp


def roc(scores, labels) -> list[RocPoint]:
    """ROC curve from (0, 0) at threshold -inf to (1, 1) at +inf."""
    scores, labels, _ = _clean(scores, labels)
    P, N = int(labels.sum()), int(len(labels) - labels.sum())
    if P == 0 or N == 0:
        raise ValueError("single-class labels: ROC needs both normal and abnormal documents")
    distinct, fp, tp = _roc_counts(scores, labels)
    # with "score < threshold", threshold distinct[i] admits the groups before i
    thresholds = np.concatenate([[-np.inf], distinct[1:], [np.inf]])
    return [RocPoint(float(t), f / N, p / P) for t, f, p in zip(thresholds, fp, tp)]


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; ties earn half credit."""
    scores, labels, _ = _clean(scores, labels)
    P, N = int(labels.sum()), int(len(labels) - labels.sum())
    if P == 0 or N == 0:
        raise ValueError("single-class labels: AUC needs both normal and abnormal documents")
    _, fp, tp = _roc_counts(scores, labels)
    twice_area = int((np.diff(fp) * (tp[1:] + tp[:-1])).sum())
    return twice_area / (2 * P * N)


def summary_line(scores, labels) -> str:
    clean, lab, excluded = _clean(scores, labels)
    return f"auc={auc(clean, lab):.6f} n={len(clean)} excluded={excluded}"


def write_roc(points: list[RocPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for p in points:
            w.writerow([repr(float(p.threshold)), repr(float(p.fpr)), repr(float(p.tpr))])
