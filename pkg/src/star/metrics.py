"""Threshold-free anomaly detection metrics.

Point AUC-ROC is the Mann-Whitney statistic with average-rank tie handling;
AUC-PR is the average-precision step sum over a descending-score sweep.
Range-buffered variants smooth binary labels into soft targets (1 inside a
segment, decaying linearly to 0 over ``buffer_l`` points outside, overlaps
taking the max) and generalize both AUCs by splitting each point into a
positive mass (the target) and a negative mass (its complement), self-pairs
included; at buffer 0 they reduce exactly to the point metrics. VUS-ROC and
VUS-PR average the buffered values over integer buffers 0..L.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MetricError


@dataclass
class MetricReport:
    auc_roc: float
    auc_pr: float
    r_auc_roc: float
    r_auc_pr: float
    vus_roc: float
    vus_pr: float
    buffer_l: int
    max_buffer_L: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "auc_roc", "auc_pr", "r_auc_roc", "r_auc_pr",
            "vus_roc", "vus_pr", "buffer_l", "max_buffer_L")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _validate(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary")
    if labels.min() == labels.max():
        raise MetricError("metric undefined: labels contain a single class")
    return scores, labels.astype(np.float64)


def label_segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of 1s."""
    lab = np.asarray(labels).astype(bool)
    edges = np.flatnonzero(np.diff(np.r_[0, lab.view(np.int8), 0]))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def smooth_labels(labels: np.ndarray, buffer_l: int) -> np.ndarray:
    """Soft targets: 1 inside segments, linear decay to 0 at distance
    buffer_l outside the boundaries, overlapping buffers take the max."""
    if buffer_l < 0:
        raise ConfigError("buffer_l must be >= 0")
    target = np.asarray(labels, dtype=np.float64).copy()
    if buffer_l == 0:
        return target
    T = len(target)
    for a, b in label_segments(labels):
        for j in range(1, buffer_l):
            v = 1.0 - j / buffer_l
            if a - j >= 0:
                target[a - j] = max(target[a - j], v)
            if b - 1 + j < T:
                target[b - 1 + j] = max(target[b - 1 + j], v)
    return target


def _group_sums(scores: np.ndarray, w_pos: np.ndarray,
                w_neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per tie-group positive/negative weight sums, ascending score order."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    gp = np.add.reduceat(w_pos[order], starts)
    gn = np.add.reduceat(w_neg[order], starts)
    return gp, gn


def weighted_roc_auc(scores: np.ndarray, w_pos: np.ndarray, w_neg: np.ndarray) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal) under point weights."""
    W_pos, W_neg = w_pos.sum(), w_neg.sum()
    if W_pos <= 0 or W_neg <= 0:
        raise MetricError("metric undefined: one class carries zero weight")
    gp, gn = _group_sums(scores, w_pos, w_neg)
    below = np.concatenate(([0.0], np.cumsum(gn)[:-1]))
    numerator = np.sum(gp * (below + 0.5 * gn))
    return float(numerator / (W_pos * W_neg))


def weighted_pr_auc(scores: np.ndarray, w_pos: np.ndarray, w_neg: np.ndarray) -> float:
    """Average precision over a descending-score sweep, ties as one block."""
    W_pos = w_pos.sum()
    if W_pos <= 0:
        raise MetricError("metric undefined: no positive weight")
    gp, gn = _group_sums(scores, w_pos, w_neg)
    cum_pos = np.cumsum(gp[::-1])
    cum_neg = np.cumsum(gn[::-1])
    recall = cum_pos / W_pos
    precision = cum_pos / (cum_pos + cum_neg)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    scores, lab = _validate(scores, labels)
    return weighted_roc_auc(scores, lab, 1.0 - lab)


def auc_pr(scores: np.ndarray, labels: np.ndarray) -> float:
    scores, lab = _validate(scores, labels)
    return weighted_pr_auc(scores, lab, 1.0 - lab)


def r_auc(scores: np.ndarray, labels: np.ndarray, buffer_l: int) -> tuple[float, float]:
    """Range-buffered (ROC, PR) pair against linearly smoothed targets."""
    scores, lab = _validate(scores, labels)
    target = smooth_labels(lab, buffer_l)
    return (weighted_roc_auc(scores, target, 1.0 - target),
            weighted_pr_auc(scores, target, 1.0 - target))


def vus(scores: np.ndarray, labels: np.ndarray, max_buffer_L: int) -> tuple[float, float]:
    """Mean of the buffered AUC pair over integer buffers 0..max_buffer_L."""
    if max_buffer_L < 0:
        raise ConfigError("max_buffer_L must be >= 0")
    rocs, prs = zip(*(r_auc(scores, labels, b) for b in range(max_buffer_L + 1)))
    return float(np.mean(rocs)), float(np.mean(prs))


def evaluate(scores: np.ndarray, labels: np.ndarray,
             buffer_l: int = 16, max_buffer_L: int = 16) -> MetricReport:
    """Compute the full report at the given buffer settings."""
    roc = auc_roc(scores, labels)
    pr = auc_pr(scores, labels)
    r_roc, r_pr = r_auc(scores, labels, buffer_l)
    v_roc, v_pr = vus(scores, labels, max_buffer_L)
    return MetricReport(auc_roc=roc, auc_pr=pr, r_auc_roc=r_roc, r_auc_pr=r_pr,
                        vus_roc=v_roc, vus_pr=v_pr,
                        buffer_l=buffer_l, max_buffer_L=max_buffer_L)
