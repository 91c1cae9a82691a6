"""Ranking metrics used by the detection and correlation studies."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import stats

from .exceptions import ShapeError, UndefinedMetricError


def average_precision(scores, truth) -> float:
    """AP over the descending-score ranking; equal scores keep their original order.

    Raises UndefinedMetricError when ``truth`` has no positive.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if s.shape != t.shape:
        raise ShapeError("scores and truth differ in length")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    if not np.all(np.isfinite(s)):
        raise ShapeError("scores must be finite")
    order = np.argsort(-s, kind="stable")
    hits = t[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


class SpearmanResult(NamedTuple):
    rho: float
    pvalue: float


def spearman(a, b) -> SpearmanResult:
    """Spearman correlation (average ranks for ties) with a two-sided t-approximation p-value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("spearman needs equal-length vectors")
    if a.size < 3:
        raise ShapeError("spearman needs at least 3 observations")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedMetricError("spearman correlation is undefined for a constant vector")
    res = stats.spearmanr(a, b)
    return SpearmanResult(float(res.statistic), float(res.pvalue))
