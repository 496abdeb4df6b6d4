"""Binary-classification and retrieval metrics.

ROC-AUC is the Mann-Whitney statistic with half credit for ties.  PR-AUC
is the step-wise (non-interpolated) area, i.e. average precision: the sum
over distinct score thresholds of recall increments times precision.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Metric needs both classes present."""


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give the half-credit tie rule
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


@dataclass(frozen=True)
class Thresholded:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: bool  # no predicted positives; precision reported as 0


def thresholded(scores, labels, t: float = 0.5) -> Thresholded:
    """Confusion-matrix metrics with ``score >= t`` predicted positive."""
    s, y = _as_arrays(scores, labels)
    pred = s >= t
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    degenerate = tp + fp == 0
    precision = 0.0 if degenerate else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    accuracy = (tp + tn) / s.size if s.size else 0.0
    return Thresholded(precision, recall, f1, accuracy, tp, fp, tn, fn, degenerate)


def mean_rank(ranks: Sequence[int]) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("mean_rank of an empty list")
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    return float(r.mean())


@dataclass
class MetricsReport:
    roc_auc: float | None
    pr_auc: float | None
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: int
    positives: int
    tp: int
    fp: int
    tn: int
    fn: int
    mean_rank: float | None = None
    groups: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = {k: v.to_dict() for k, v in sorted(self.groups.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _safe(fn, s, y):
    try:
        return fn(s, y)
    except UndefinedMetricError:
        return None


def report(probs, labels, groups: Sequence[str | None] | None = None, t: float = 0.5) -> MetricsReport:
    """All classification metrics; AUCs are ``None`` when a class is missing."""
    s, y = _as_arrays(probs, labels)
    th = thresholded(s, y, t)
    rep = MetricsReport(
        roc_auc=_safe(roc_auc, s, y),
        pr_auc=_safe(pr_auc, s, y),
        precision=th.precision,
        recall=th.recall,
        f1=th.f1,
        accuracy=th.accuracy,
        support=int(y.size),
        positives=int(y.sum()),
        tp=th.tp,
        fp=th.fp,
        tn=th.tn,
        fn=th.fn,
    )
    if groups is not None:
        g = np.asarray([x if x is not None else "" for x in groups], dtype=object)
        for tag in sorted(set(g.tolist()) - {""}):
            sel = g == tag
            rep.groups[tag] = report(s[sel], y[sel], None, t)
    return rep
