"""Paired significance tests on per-run metric differences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special, stats

EXACT_LIMIT = 25  # largest number of nonzero differences handled by exact enumeration


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    p: float
    m: int  # nonzero differences used
    exact: bool


def _differences(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-d and equally long, got {a.shape} and {b.shape}")
    return a - b


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularised incomplete beta."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Student t-test on the paired differences a - b (two-sided)."""
    d = _differences(a, b)
    n = len(d)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n - 1)
        raise DegenerateSampleError("differences have zero variance and nonzero mean")
    t = mean / (sd / np.sqrt(n))
    return TTestResult(float(t), student_t_sf2(t, n - 1), n - 1)


def signed_ranks(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |d| (ties share the mean rank) and the signs, zeros already removed."""
    return stats.rankdata(np.abs(d)), np.sign(d)


def exact_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (index = doubled statistic)."""
    r = [int(v) for v in doubled_ranks]
    counts = np.zeros(sum(r) + 1, dtype=np.int64)
    counts[0] = 1
    for v in r:  # ranks are >= 1, so every v >= 2
        shifted = counts[:-v].copy()
        counts[v:] += shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Signed-rank test on a - b; W = min(W+, W-), two-sided p.

    Exact for at most 25 nonzero differences (all sign patterns counted via
    a convolution over doubled ranks, so tied half-ranks stay integral);
    normal approximation with tie and continuity corrections beyond that.
    """
    d = _differences(a, b)
    d = d[d != 0]
    m = len(d)
    if m == 0:
        raise DegenerateSampleError("all paired differences are zero")
    ranks, sign = signed_ranks(d)
    w_plus = ranks[sign > 0].sum()
    w_minus = ranks[sign < 0].sum()
    w = min(w_plus, w_minus)
    if m <= EXACT_LIMIT:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = exact_null_counts(doubled)
        total = int(doubled.sum())
        s = np.arange(total + 1)
        hit = np.minimum(s, total - s) <= int(round(2 * w))
        p = int(counts[hit].sum()) / float(2 ** m)
        return WilcoxonResult(float(w), p, m, True)
    mu = m * (m + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = m * (m + 1) * (2 * m + 1) / 24.0 - (tie_sizes ** 3 - tie_sizes).sum() / 48.0
    z = (w - mu + 0.5) / np.sqrt(var)
    p = min(1.0, 2.0 * float(special.ndtr(z)))
    return WilcoxonResult(float(w), p, m, False)
