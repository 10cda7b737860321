"""Reliability and agreement statistics.

Implements the analysis battery used for rater-agreement studies: ICC
(two-way mixed-effects, absolute agreement, single or average rating)
with 95% confidence intervals from the F-distribution method, the exact
Wilcoxon signed-rank test (dynamic programming for small n, tie- and
continuity-corrected normal approximation for large n), mean-absolute-
difference and SD/SEM summaries, the percentage of curves below a
clinical threshold, and ordinary least-squares R^2.

ICC formulas follow the McGraw & Wong two-way absolute-agreement
definitions; all operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .fdist import f_ppf

DEFAULT_CLINICAL_THRESHOLD_DEG = 5.0
EXACT_WILCOXON_MAX_N = 25


class StatsError(ValueError):
    pass


@dataclass
class RatingTable:
    """n curves x k repeated measurements (degrees), listwise complete."""

    matrix: np.ndarray
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise StatsError("rating table must be 2-D")
        n, k = self.matrix.shape
        if n < 2 or k < 2:
            raise StatsError(f"need n >= 2 and k >= 2, got {n}x{k}")
        if not np.all(np.isfinite(self.matrix)):
            raise StatsError("rating table has missing cells; listwise-complete input required")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class IccResult:
    icc: float
    ci_low: float
    ci_high: float
    model: str
    anova: dict


def _two_way_anova(m: np.ndarray):
    n, k = m.shape
    grand = m.mean()
    ss_rows = k * float(np.sum((m.mean(axis=1) - grand) ** 2))
    ss_cols = n * float(np.sum((m.mean(axis=0) - grand) ** 2))
    ss_total = float(np.sum((m - grand) ** 2))
    ss_err = ss_total - ss_rows - ss_cols
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = max(ss_err, 0.0) / ((n - 1) * (k - 1))
    return ms_rows, ms_cols, ms_err


def icc_absolute(table: RatingTable, rating: str = "single", alpha: float = 0.05) -> IccResult:
    """Two-way mixed, absolute-agreement ICC with a 95% CI.

    rating="single" is ICC(A,1); rating="average" is ICC(A,k). The CI uses
    the F-distribution method with Satterthwaite degrees of freedom; the
    average-rating bounds are the single-rating bounds Spearman-Brown
    stepped up to k measurements.
    """
    if rating not in ("single", "average"):
        raise StatsError(f"unknown rating type {rating!r}")
    m = table.matrix
    n, k = m.shape
    msr, msc, mse = _two_way_anova(m)
    if np.all(m == m[:, :1]):
        # identical measurement columns: agreement is exact by definition,
        # so rounding residue from the ANOVA means must not leak into the ICC
        msc = mse = 0.0
    if msr <= 1e-300 and mse <= 1e-300:
        raise StatsError("undefined ICC: no between-subject or residual variance")

    icc1 = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)

    def step_up(v: float) -> float:
        denom = 1.0 + (k - 1) * v
        return k * v / denom if denom != 0 else 1.0

    if mse <= 1e-300 and msc <= 1e-300:
        # perfect agreement: no uncertainty to propagate
        lo1 = hi1 = icc1
    else:
        a = k * icc1 / (n * (1.0 - icc1)) if icc1 < 1.0 else math.inf
        b = 1.0 + k * icc1 * (n - 1) / (n * (1.0 - icc1)) if icc1 < 1.0 else math.inf
        if math.isinf(a) or math.isinf(b):
            lo1 = hi1 = icc1
        else:
            num = (a * msc + b * mse) ** 2
            den = (a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1))
            v = num / den if den > 0 else 1.0
            v = max(v, 1.0)
            f1 = f_ppf(1.0 - alpha / 2.0, n - 1, v)
            f2 = f_ppf(1.0 - alpha / 2.0, v, n - 1)
            lo1 = n * (msr - f1 * mse) / (
                f1 * (k * msc + (k * n - k - n) * mse) + n * msr)
            hi1 = n * (f2 * msr - mse) / (
                k * msc + (k * n - k - n) * mse + n * f2 * msr)
            lo1, hi1 = min(lo1, icc1), max(hi1, icc1)

    if rating == "single":
        icc, lo, hi = icc1, lo1, hi1
        model = "two-way mixed, absolute agreement, single rating"
    else:
        icc = (msr - mse) / (msr + (msc - mse) / n)
        lo, hi = step_up(lo1), step_up(hi1)
        model = "two-way mixed, absolute agreement, average rating"

    return IccResult(
        icc=float(icc), ci_low=float(min(lo, icc)), ci_high=float(min(max(hi, icc), 1.0)),
        model=model,
        anova={"MS_rows": msr, "MS_cols": msc, "MS_error": mse,
               "df_rows": n - 1, "df_cols": k - 1, "df_error": (n - 1) * (k - 1)},
    )


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_statistic(d: np.ndarray) -> tuple[float, np.ndarray]:
    """(W+, midranks of |d|) for nonzero differences d."""
    ranks = _midranks(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def exact_signed_rank_p(d: np.ndarray, two_sided: bool = True) -> float:
    """Exact p by dynamic programming over the rank-sum distribution.

    Midranks are doubled so ties stay on an integer lattice; the null
    distributes each rank to the positive side with probability 1/2.
    """
    w_plus, ranks = signed_rank_statistic(d)
    r2 = np.rint(2.0 * ranks).astype(int)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] += counts[:-r or None]
    n = len(d)
    denom = 2.0 ** n
    w2 = int(round(2.0 * w_plus))
    p_ge = counts[w2:].sum() / denom
    p_le = counts[:w2 + 1].sum() / denom
    if two_sided:
        return min(1.0, 2.0 * min(p_ge, p_le))
    return p_ge


def wilcoxon_signed_rank(
    x, y, two_sided: bool = True, all_zero_p_one: bool = False,
) -> float:
    """Paired signed-rank test p-value; zeros discarded before ranking.

    Exact distribution for n <= 25, otherwise the normal approximation
    with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise StatsError("series lengths differ")
    d = x - y
    d = d[d != 0.0]
    if len(d) == 0:
        if all_zero_p_one:
            return 1.0
        raise StatsError("all paired differences are zero; no test possible")
    if len(d) < 5:
        raise StatsError(f"need >= 5 nonzero differences, got {len(d)}")

    n = len(d)
    if n <= EXACT_WILCOXON_MAX_N:
        return exact_signed_rank_p(d, two_sided)

    w_plus, ranks = signed_rank_statistic(d)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        raise StatsError("degenerate variance in normal approximation")
    z = (w_plus - mean - 0.5 * np.sign(w_plus - mean)) / math.sqrt(var)
    p_one = 0.5 * math.erfc(abs(z) / math.sqrt(2.0))
    return min(1.0, 2.0 * p_one) if two_sided else p_one


# ---------------------------------------------------------------------------
# descriptive summaries

def mad_of_group(values) -> float:
    """Mean absolute difference over all unordered pairs."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise StatsError("MAD needs at least 2 values")
    return float(np.mean([abs(a - b) for a, b in combinations(v, 2)]))


def mad_summary(groups) -> dict:
    """Per-group MAD aggregated as mean +/- sd with the max, Table-style."""
    if not len(groups):
        raise StatsError("no groups")
    mads = np.array([mad_of_group(g) for g in groups])
    return {
        "per_group": mads.tolist(),
        "mean": float(mads.mean()),
        "sd": float(mads.std(ddof=1)) if len(mads) > 1 else 0.0,
        "max": float(mads.max()),
    }


def pct_below(mads, threshold: float = DEFAULT_CLINICAL_THRESHOLD_DEG) -> tuple[float, int]:
    """(percent, count) of values strictly below the threshold."""
    v = np.asarray(mads, dtype=float)
    if len(v) == 0:
        raise StatsError("empty input")
    count = int(np.sum(v < threshold))
    return 100.0 * count / len(v), count


def sd_sem_summary(groups) -> dict:
    """Per-group sample SD and SEM = SD/sqrt(k), aggregated like mad_summary."""
    if not len(groups):
        raise StatsError("no groups")
    sds, sems = [], []
    for g in groups:
        v = np.asarray(g, dtype=float)
        if len(v) < 2:
            raise StatsError("SD needs at least 2 values per group")
        sd = float(v.std(ddof=1))
        sds.append(sd)
        sems.append(sd / math.sqrt(len(v)))
    sds = np.array(sds)
    sems = np.array(sems)
    return {
        "sd_mean": float(sds.mean()),
        "sd_sd": float(sds.std(ddof=1)) if len(sds) > 1 else 0.0,
        "sd_max": float(sds.max()),
        "sem_mean": float(sems.mean()),
        "sem_sd": float(sems.std(ddof=1)) if len(sems) > 1 else 0.0,
        "sem_max": float(sems.max()),
    }


def linreg_r2(x, y) -> tuple[float, float, float]:
    """(slope, intercept, r2) by ordinary least squares."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise StatsError("need equal-length series of at least 3 points")
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0:
        raise StatsError("zero variance in x")
    syy = float(np.sum((y - y.mean()) ** 2))
    if syy == 0:
        raise StatsError("zero variance in y: r2 undefined")
    sxy = float(np.sum((x - x.mean()) * (y - y.mean())))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    return slope, intercept, 1.0 - ss_res / syy
