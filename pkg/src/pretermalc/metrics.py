"""Ranking metrics computed directly from scores: AUC via the rank-sum
statistic with half credit for ties, and PR-AUC as average precision with
tied scores collapsed into one threshold step.

The positive class throughout is preterm; scores are predicted preterm
probabilities (any monotone transform gives identical AUC).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .records import Label


def _as_arrays(scores: Sequence[float], labels: Sequence[Label]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([int(l) for l in labels], dtype=np.int64)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores and labels must be equal-length 1-d sequences, got {s.shape} vs {y.shape}")
    if s.size == 0:
        raise ValueError("no examples to score")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    return s, y == int(Label.PRETERM)


def _require_both_classes(pos: np.ndarray) -> tuple[int, int]:
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"metric undefined with a single class (pos={n_pos}, neg={n_neg})")
    return n_pos, n_neg


def _midranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average rank of their block."""
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # positions i..j (0-based) share ranks i+1..j+1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: Sequence[float], labels: Sequence[Label]) -> float:
    """Probability a random positive outscores a random negative, ties worth
    one half. Equals exhaustive pair counting."""
    s, pos = _as_arrays(scores, labels)
    n_pos, n_neg = _require_both_classes(pos)
    ranks = _midranks(s)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _require_positives(pos: np.ndarray) -> int:
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("metric undefined without positive examples")
    return n_pos


def pr_auc(scores: Sequence[float], labels: Sequence[Label]) -> float:
    """Average precision: sum over distinct descending thresholds of
    precision * recall increment."""
    s, pos = _as_arrays(scores, labels)
    n_pos = _require_positives(pos)
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    pos_desc = pos[order]
    tp = 0
    seen = 0
    prev_tp = 0
    total = 0.0  # sum of precision * true-positive increment; divide once
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and s_desc[j + 1] == s_desc[i]:
            j += 1
        tp += int(pos_desc[i : j + 1].sum())
        seen += j - i + 1
        if tp > prev_tp:
            total += (tp / seen) * (tp - prev_tp)
            prev_tp = tp
        i = j + 1
    return total / n_pos


def roc_points(scores: Sequence[float], labels: Sequence[Label]) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline vertices (fpr, tpr), one vertex per distinct threshold,
    starting at (0, 0) and ending at (1, 1)."""
    s, pos = _as_arrays(scores, labels)
    n_pos, n_neg = _require_both_classes(pos)
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    pos_desc = pos[order]
    fpr = [0.0]
    tpr = [0.0]
    tp = fp = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and s_desc[j + 1] == s_desc[i]:
            j += 1
        block_pos = int(pos_desc[i : j + 1].sum())
        tp += block_pos
        fp += (j - i + 1) - block_pos
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        i = j + 1
    return np.array(fpr), np.array(tpr)


def pr_points(scores: Sequence[float], labels: Sequence[Label]) -> tuple[np.ndarray, np.ndarray]:
    """Precision-recall vertices per distinct threshold, recall ascending."""
    s, pos = _as_arrays(scores, labels)
    n_pos = _require_positives(pos)
    order = np.argsort(-s, kind="stable")
    s_desc = s[order]
    pos_desc = pos[order]
    recall = []
    precision = []
    tp = 0
    seen = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and s_desc[j + 1] == s_desc[i]:
            j += 1
        tp += int(pos_desc[i : j + 1].sum())
        seen += j - i + 1
        recall.append(tp / n_pos)
        precision.append(tp / seen)
        i = j + 1
    return np.array(recall), np.array(precision)


def interp_roc(fpr: np.ndarray, tpr: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """TPR sampled at fixed FPR grid points by linear interpolation."""
    return np.interp(grid, fpr, tpr)


def interp_pr(recall: np.ndarray, precision: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Precision sampled at fixed recall grid points (step-wise from the
    right, matching the average-precision convention)."""
    out = np.empty(grid.size, dtype=np.float64)
    for k, r in enumerate(grid):
        mask = recall >= r
        out[k] = float(precision[mask].max()) if mask.any() else float(precision[-1])
    return out
