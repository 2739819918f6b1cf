"""Paired signed-rank and unpaired rank-sum tests, exact at small n.

Both tests use average ranks for ties.  Exact two-sided p-values are
computed from the full conditional null distribution given the observed
(tied) rank multiset: all 2^n sign assignments for the signed-rank test and
all C(n_a + n_b, n_a) group splits for the rank-sum test, evaluated by
dynamic programming over doubled ranks (doubling makes midranks integral).
Above the exact-size threshold a tie-corrected normal approximation with
continuity correction is used.  Two-sided p = min(1, 2 * min(lower tail,
upper tail)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact" | "normal-approx"
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "n_effective": self.n_effective, "method": self.method,
                "degenerate": self.degenerate}


def _two_sided_from_tails(p_low: float, p_high: float) -> float:
    return min(1.0, 2.0 * min(p_low, p_high))


def _signed_rank_exact_p(doubled_ranks: np.ndarray, w2: float) -> float:
    """Tail probabilities of 2*W+ over all 2^n sign patterns, by DP."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    n_patterns = counts.sum()
    k = int(round(w2))
    p_low = counts[:k + 1].sum() / n_patterns
    p_high = counts[k:].sum() / n_patterns
    return _two_sided_from_tails(p_low, p_high)


def wilcoxon_signed_rank(x, y, exact_threshold: int = 25) -> TestResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are discarded (reduced-sample convention); tied
    absolute differences receive average ranks.  The statistic is W+, the
    rank sum of positive differences.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise ValueError("paired samples must be equal-length 1D arrays, n >= 1")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return TestResult(0.0, 1.0, 0, "exact", degenerate=True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_threshold:
        doubled = np.rint(2.0 * ranks).astype(int)
        p = _signed_rank_exact_p(doubled, 2.0 * w_plus)
        return TestResult(w_plus, p, n, "exact")
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if sigma2 <= 0:
        return TestResult(w_plus, 1.0, n, "normal-approx", degenerate=True)
    z = (w_plus - mu - 0.5 * np.sign(w_plus - mu)) / np.sqrt(sigma2)
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return TestResult(w_plus, p, n, "normal-approx")


def _rank_sum_exact_p(doubled_ranks: np.ndarray, n_a: int, r2: float) -> float:
    """Tail probabilities of the doubled first-group rank sum over all
    equally likely size-n_a subsets, by DP over (subset size, rank sum)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros((n_a + 1, total + 1))
    counts[0, 0] = 1.0
    for r in doubled_ranks:
        upd = counts.copy()
        upd[1:, r:] += counts[:-1, :counts.shape[1] - r]
        counts = upd
    dist = counts[n_a]
    n_splits = dist.sum()
    k = int(round(r2))
    p_low = dist[:k + 1].sum() / n_splits
    p_high = dist[k:].sum() / n_splits
    return _two_sided_from_tails(p_low, p_high)


def wilcoxon_rank_sum(a, b, exact_threshold: int = 20) -> TestResult:
    """Two-sided unpaired Wilcoxon rank-sum (Mann-Whitney U) test.

    The statistic is U for the first sample: U = R_a - n_a(n_a+1)/2 with R_a
    the pooled rank sum of sample a (average ranks for ties).
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty 1D arrays")
    n_a, n_b = a.size, b.size
    pooled_ranks = rankdata(np.concatenate([a, b]))
    r_a = float(pooled_ranks[:n_a].sum())
    u = r_a - n_a * (n_a + 1) / 2.0
    if n_a + n_b <= exact_threshold:
        doubled = np.rint(2.0 * pooled_ranks).astype(int)
        p = _rank_sum_exact_p(doubled, n_a, 2.0 * r_a)
        return TestResult(u, p, n_a + n_b, "exact")
    n = n_a + n_b
    mu = n_a * n_b / 2.0
    _, tie_counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
    sigma2 = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if sigma2 <= 0:
        return TestResult(u, 1.0, n, "normal-approx", degenerate=True)
    z = (u - mu - 0.5 * np.sign(u - mu)) / np.sqrt(sigma2)
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return TestResult(u, p, n, "normal-approx")
