"""Two-sided Wilcoxon rank-sum test with the h = -1/0/+1 decision used for model comparison.

Small samples (both sides <= ``EXACT_MAX``) use the exact permutation
distribution of the rank sum, ties handled with midranks.  Larger samples
use the normal approximation with tie and continuity corrections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import kernels

EXACT_MAX = 12


@dataclass(frozen=True)
class SignificanceResult:
    h: int
    p_value: float
    statistic: float  # rank sum of the first sample
    method: str


def rank_sum(a, b):
    """Midrank sum of ``a`` within the pooled sample."""
    ranks = rankdata(np.concatenate([np.asarray(a, float), np.asarray(b, float)]), method="average")
    return float(ranks[: len(a)].sum()), ranks


def exact_p_value(a, b):
    """P(|W - E W| >= |w_obs - E W|) under all C(n+m, n) equally likely labelings."""
    n, m = len(a), len(b)
    w, ranks = rank_sum(a, b)
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    counts = kernels.subset_sum_counts(doubled, n)
    centre = n * (n + m + 1)  # twice the expected rank sum
    observed = abs(int(round(2.0 * w)) - centre)
    sums = np.arange(len(counts))
    extreme = int(counts[np.abs(sums - centre) >= observed].sum())
    return extreme / math.comb(n + m, n), w


def normal_p_value(a, b):
    n, m = len(a), len(b)
    total = n + m
    w, ranks = rank_sum(a, b)
    _, ties = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(ties**3 - ties)) / (total * (total - 1))
    var = n * m / 12.0 * ((total + 1) - tie_term)
    if var <= 0:
        return 1.0, w
    z = max(abs(w - n * (total + 1) / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0))), w


def wilcoxon_rank_sum(a, b, alpha=0.05, method="auto"):
    """Compare error samples ``a`` (proposed) and ``b`` (reference).

    ``h = +1`` when the difference is significant and ``a`` has the lower
    mean (a is better), ``-1`` when significant and ``a`` is worse, else 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two observations")
    if method == "auto":
        method = "exact" if max(len(a), len(b)) <= EXACT_MAX else "normal"
    if method == "exact":
        p, w = exact_p_value(a, b)
    elif method == "normal":
        p, w = normal_p_value(a, b)
    else:
        raise ValueError(f"unknown method {method!r}")

    h = 0
    if p < alpha:
        diff = a.mean() - b.mean()
        if diff == 0:
            # equal means: fall back to the rank-sum direction
            diff = w - len(a) * (len(a) + len(b) + 1) / 2.0
        h = 1 if diff < 0 else -1 if diff > 0 else 0
    return SignificanceResult(h, float(p), w, method)
