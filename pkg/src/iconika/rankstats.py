"""Tie-aware rank statistics and ranked-retrieval metrics.

Everything in this module is a pure function over numeric vectors:
fractional ranking, Spearman's rank correlation with significance
(t-approximation or exact permutation), and average precision with a
configurable positivity threshold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

T_APPROXIMATION = "t-approximation"
EXACT_PERMUTATION = "exact-permutation"

# n! beyond this is not enumerable at interactive speed
MAX_EXACT_N = 8


@dataclass(frozen=True)
class CorrelationResult:
    """Correlation coefficient with its significance.

    ``degenerate`` is set when the coefficient could not be estimated the
    normal way (constant input vector, or too few samples for the
    t-approximation); in that case ``rho`` / ``p_value`` hold conservative
    defaults (0 and 1).
    """

    rho: float
    p_value: float
    n: int
    method: str
    degenerate: bool = False


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise ValueError(f"{name} contains a non-finite value at index {bad}")
    return arr


def fractional_ranks(scores) -> np.ndarray:
    """Rank scores ascending, averaging ranks over tie groups.

    Equal scores receive the mean of the 1-based positions they occupy, so
    the output always sums to n(n+1)/2 and every rank is an integer or a
    half-integer. Higher score means higher rank value.
    """
    arr = _as_vector(scores, "scores")
    n = arr.size
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        # positions i..j (0-based) hold a tie group; mean of 1-based positions
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _rank_correlation(ranks_a: np.ndarray, ranks_b: np.ndarray) -> float | None:
    """Correlation of two rank vectors; None when either is constant."""
    da = ranks_a - ranks_a.mean()
    db = ranks_b - ranks_b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return None
    return float(da @ db) / denom


def _permutation_pvalue(ranks_a: np.ndarray, ranks_b: np.ndarray) -> float:
    """Exact two-sided permutation p-value over all orderings of b.

    Doubled fractional ranks are integers, and the correlation denominator
    is invariant under permutation, so |rho_perm| >= |rho_obs| reduces to an
    exact integer comparison of centered numerators. No float round-off can
    change the count.
    """
    n = ranks_a.size
    if n > MAX_EXACT_N:
        raise ValueError(f"exact permutation p-value limited to n <= {MAX_EXACT_N}, got {n}")
    u = np.rint(2.0 * ranks_a).astype(np.int64)
    v = np.rint(2.0 * ranks_b).astype(np.int64)
    offset = int(u.sum()) * int(v.sum())
    observed = abs(n * int(u @ v) - offset)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    nums = np.abs(n * (v[perms] @ u) - offset)
    return float(np.count_nonzero(nums >= observed)) / float(len(perms))


def spearman_pvalue(
    rho: float,
    n: int,
    method: str = T_APPROXIMATION,
    *,
    ranks_a: np.ndarray | None = None,
    ranks_b: np.ndarray | None = None,
) -> tuple[float, bool]:
    """Two-sided significance of a rank correlation.

    t-approximation: t = rho * sqrt((n-2)/(1-rho^2)) against Student-t with
    n-2 degrees of freedom; n < 4 is too small and yields (1.0, degenerate).
    exact-permutation: fraction of all n! orderings of b with |rho| at least
    the observed one. The tied rank vectors matter for the enumeration, so
    pass them when available; without them an untied 1..n ranking is assumed.

    Returns (p_value, degenerate).
    """
    if not abs(rho) <= 1.0 + 1e-12:
        raise ValueError(f"|rho| must be <= 1, got {rho}")
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if method == T_APPROXIMATION:
        if n < 4:
            return 1.0, True
        denom = 1.0 - rho * rho
        if denom <= 0.0:
            return 0.0, False
        t = rho * math.sqrt((n - 2) / denom)
        return float(2.0 * _scipy_stats.t.sf(abs(t), n - 2)), False
    if method == EXACT_PERMUTATION:
        if ranks_a is None or ranks_b is None:
            # rho alone does not determine the tied rank multisets; without
            # them only the untied |rho| = 1 extremes are well-posed
            if abs(abs(rho) - 1.0) > 1e-12:
                raise ValueError(
                    "exact-permutation needs ranks_a/ranks_b unless |rho| = 1"
                )
            ranks_a = np.arange(1, n + 1, dtype=np.float64)
            ranks_b = ranks_a if rho > 0 else ranks_a[::-1].copy()
        return _permutation_pvalue(np.asarray(ranks_a), np.asarray(ranks_b)), False
    raise ValueError(f"unknown method {method!r}")


def spearman(a, b, method: str = T_APPROXIMATION) -> CorrelationResult:
    """Spearman's rank correlation between two score vectors.

    Scores are converted to fractional ranks and correlated directly
    (covariance over the product of standard deviations), which handles rank
    ties. A constant input vector makes the coefficient undefined; that case
    reports rho = 0 with the degenerate flag set.
    """
    va = _as_vector(a, "a")
    vb = _as_vector(b, "b")
    if va.size != vb.size:
        raise ValueError(f"length mismatch: {va.size} vs {vb.size}")
    if va.size < 2:
        raise ValueError(f"need at least 2 samples, got {va.size}")
    ranks_a = fractional_ranks(va)
    ranks_b = fractional_ranks(vb)
    rho = _rank_correlation(ranks_a, ranks_b)
    if rho is None:
        return CorrelationResult(0.0, 1.0, va.size, method, degenerate=True)
    p, degenerate = spearman_pvalue(
        rho, va.size, method, ranks_a=ranks_a, ranks_b=ranks_b
    )
    return CorrelationResult(rho, p, va.size, method, degenerate=degenerate)


def average_precision(scores, ratings, alpha: float = 1.5) -> float:
    """Average precision of a ranked list with positives = rating > alpha.

    Items are sorted by descending score; equal scores keep their input
    order, so callers control tie-breaking by supplying items in a stable
    key order (ascending image id by convention).
    """
    s = _as_vector(scores, "scores")
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 1 or r.size != s.size:
        raise ValueError(f"scores and ratings must align: {s.size} vs {r.size}")
    positives = r > alpha
    npos = int(np.count_nonzero(positives))
    if npos == 0:
        raise ValueError(f"average precision undefined: no rating > {alpha}")
    order = np.argsort(-s, kind="stable")
    hits = np.cumsum(positives[order])
    where = np.flatnonzero(positives[order]) + 1  # 1-based hit positions
    return float(np.sum(hits[where - 1] / where)) / npos
