"""Rank statistics: AUROC, paired/unpaired t-tests, Mann-Whitney U.

AUROC uses the Mann-Whitney rank formulation with midrank tie handling, so
it equals the pairwise concordance probability exactly (ties get half
credit). The Mann-Whitney test enumerates the exact null distribution for
small samples (conditioning on the observed, possibly tied, values) and
falls back to a tie- and continuity-corrected normal approximation for
larger ones.
"""

from __future__ import annotations

import math
from itertools import combinations
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats as _scipy_stats

EXACT_LIMIT = 16  # exact Mann-Whitney enumeration up to this combined size


def rank_midpoints(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values assigned the mean of their ranks."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUROC: P(score of random positive > random negative),
    with ties counted half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: both classes must be present")
    ranks = rank_midpoints(s)
    rank_sum_pos = float(np.sum(ranks[y == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation divided by sqrt(k)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.std(v, ddof=1) / math.sqrt(len(v)))


def paired_t_test(folds_a: Sequence[float], folds_b: Sequence[float],
                  two_tailed: bool = True) -> float:
    """p-value of the paired t-test on per-fold differences.

    Degenerate case: zero variance of the differences gives p=0 for a
    nonzero mean and p=1 for a zero mean.
    """
    a = np.asarray(folds_a, dtype=np.float64)
    b = np.asarray(folds_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length fold vectors with k >= 2")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / math.sqrt(len(d)))
    p = float(_scipy_stats.t.sf(abs(t), df=len(d) - 1))
    return min(1.0, 2.0 * p) if two_tailed else p


def unpaired_t_test(a: Sequence[float], b: Sequence[float],
                    two_tailed: bool = True) -> float:
    """Welch two-sample t-test p-value (no equal-variance assumption)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two values per group")
    t, p = _scipy_stats.ttest_ind(a, b, equal_var=False)
    p = float(p)
    return p if two_tailed else p / 2.0


class MannWhitneyResult(NamedTuple):
    u: float  # U statistic of the first group
    p_value: float  # two-tailed
    method: str  # "exact" or "normal"


def _u_statistic(ranks: np.ndarray, idx: Sequence[int], n_a: int) -> float:
    return float(np.sum(ranks[list(idx)])) - n_a * (n_a + 1) / 2.0


def mann_whitney_u(values_a: Sequence[float], values_b: Sequence[float],
                   exact: bool | None = None) -> MannWhitneyResult:
    """Two-tailed Mann-Whitney U test.

    ``exact=None`` (default) enumerates the null distribution when the
    combined sample has at most EXACT_LIMIT values, conditioning on the
    observed values so ties are handled exactly; otherwise it uses the
    normal approximation with tie and continuity corrections. The exact
    two-tailed p doubles the smaller tail probability, capped at 1.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if len(a) < 1 or len(b) < 1:
        raise ValueError("both groups must be non-empty")
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    pooled = np.concatenate([a, b])
    ranks = rank_midpoints(pooled)
    u_obs = _u_statistic(ranks, range(n_a), n_a)
    if exact is None:
        exact = n <= EXACT_LIMIT

    if exact:
        total = math.comb(n, n_a)
        at_most = 0
        at_least = 0
        eps = 1e-9
        for idx in combinations(range(n), n_a):
            u = _u_statistic(ranks, idx, n_a)
            if u <= u_obs + eps:
                at_most += 1
            if u >= u_obs - eps:
                at_least += 1
        p = min(1.0, 2.0 * min(at_most, at_least) / total)
        return MannWhitneyResult(u_obs, p, "exact")

    mu = n_a * n_b / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return MannWhitneyResult(u_obs, 1.0, "normal")
    # continuity correction: shift |U - mu| toward the mean by 0.5
    z = (abs(u_obs - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return MannWhitneyResult(u_obs, p, "normal")
