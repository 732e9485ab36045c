"""Ranking metrics computed from first principles.

Average precision follows the precision-at-hit sum over the score-descending
ranking with ties broken by stable input order; ROC-AUC uses the
Mann-Whitney pair statistic with half credit for tied scores.
"""
from __future__ import annotations

import numpy as np


def average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape or len(scores) == 0:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    pos_total = int(np.sum(labels == 1))
    if pos_total == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1)
    ranks = np.arange(1, len(scores) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / pos_total)


def roc_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc auc needs both classes")
    # rank-sum form of the pairwise count, exact under ties
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    p, q = len(pos), len(neg)
    u = rank_sum_pos - p * (p + 1) / 2.0
    return float(u / (p * q))
