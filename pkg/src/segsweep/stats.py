"""Nonparametric tests and agreement analysis for threshold comparisons.

Nothing here adjusts for multiple comparisons; every p-value is reported
raw.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from segsweep.errors import DegenerateSampleError, UndefinedMetricError
from segsweep.metrics import Convention, percent_volume_difference
from segsweep.sweep import ScanMetrics, fmt, unit_values

ALPHA = 0.05
EXACT_MAX_N = 25
LOA_Z = 1.96


def normal_cdf(x: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# --------------------------------------------------------------------------
# Kolmogorov-Smirnov


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # theta-function form; converges fast for small lam
        s = 0.0
        for k in range(1, 40):
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            s += term
            if term < 1e-17:
                break
        return 1.0 - math.sqrt(2 * math.pi) / lam * s
    s = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        s += term if k % 2 else -term
        if term < 1e-17:
            break
    return min(1.0, max(0.0, 2.0 * s))


def ks_statistic(sample: Sequence[float], cdf=normal_cdf) -> float:
    """sup |F_n - F| evaluated at both one-sided limits of every ECDF jump."""
    x = np.asarray(sample, dtype=float)
    n = x.size
    values, counts = np.unique(x, return_counts=True)
    above = np.cumsum(counts)  # n F_n at each jump (right limit)
    below = above - counts  # n F_n just left of each jump
    f = np.array([cdf(v) for v in values])
    return float(max(np.max(above / n - f), np.max(f - below / n)))


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    reject: bool
    n: int
    standardized: bool


def ks_normality(
    sample: Sequence[float], standardize: bool = True, alpha: float = ALPHA
) -> KSResult:
    """One-sample KS test against the standard normal.

    With ``standardize`` the sample is first centred and scaled by its
    sample SD.  Estimating those parameters makes the asymptotic p-value
    conservative (the Lilliefors effect); it is not corrected for.
    """
    x = np.asarray(sample, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise DegenerateSampleError(f"KS normality check needs n >= 4, got {x.size}")
    if np.isnan(x).any():
        raise DegenerateSampleError("sample contains NaN")
    sd = float(np.std(x, ddof=1))
    if standardize:
        if sd == 0:
            raise DegenerateSampleError("degenerate sample: zero variance")
        x = (x - np.mean(x)) / sd
    d = ks_statistic(x)
    p = kolmogorov_sf(math.sqrt(x.size) * d)
    return KSResult(d, p, p < alpha, int(x.size), standardize)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class PairedSample:
    labels: tuple[str, ...]
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if not (len(self.labels) == len(self.a) == len(self.b)):
            raise ValueError("paired sample columns differ in length")
        if len(self.labels) < 1:
            raise ValueError("paired sample is empty")

    @property
    def differences(self) -> np.ndarray:
        return np.asarray(self.a, dtype=float) - np.asarray(self.b, dtype=float)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    w_plus: float
    w_minus: float
    p_value: float  # two-sided
    n_effective: int
    method: str  # "exact" or "normal"


def midranks(values: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Ranks 1..n with ties given their average rank; also the tie group sizes."""
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    ranks = np.empty(len(values), dtype=float)
    ties = []
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        if j > i:
            ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def signed_rank_null_counts(n: int) -> np.ndarray:
    """Number of the 2**n sign assignments giving each W+ in 0..n(n+1)/2."""
    counts = np.zeros(n * (n + 1) // 2 + 1, dtype=np.int64)
    counts[0] = 1
    top = 0
    for r in range(1, n + 1):
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    return counts


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float] | None = None, method: str = "auto"
) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of ``a - b`` (or of ``a`` alone).

    Zero differences are dropped.  ``method="auto"`` uses the exact null
    distribution for n <= 25 without ties, otherwise the normal approximation
    with continuity and tie corrections.
    """
    d = np.asarray(a, dtype=float)
    if b is not None:
        d = d - np.asarray(b, dtype=float)
    if np.isnan(d).any():
        raise DegenerateSampleError("differences contain NaN")
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise DegenerateSampleError("no nonzero pairs")
    ranks, ties = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N and not ties else "normal"
    if method == "exact":
        if ties:
            raise DegenerateSampleError("exact signed-rank distribution needs untied |differences|")
        counts = signed_rank_null_counts(n)
        tail = counts[: int(w) + 1].sum() / 2.0 ** n
        p = min(1.0, 2.0 * float(tail))
    elif method == "normal":
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in ties) / 48.0
        z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, w_plus, w_minus, p, n, method)


# --------------------------------------------------------------------------
# p-value matrices


@dataclass(frozen=True)
class PValueMatrix:
    metric: str
    thresholds: tuple[float, ...]
    values: np.ndarray  # NaN on the diagonal and for undefined cells
    notes: tuple[str, ...] = ()

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold"] + [fmt(t) for t in self.thresholds])
        for i, t in enumerate(self.thresholds):
            cells = []
            for j in range(len(self.thresholds)):
                if i == j:
                    cells.append("")
                elif math.isnan(self.values[i, j]):
                    cells.append("n/a")
                else:
                    cells.append(fmt(self.values[i, j]))
            w.writerow([fmt(t)] + cells)
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.csv_text(), encoding="utf-8")


def paired_sample(
    metrics: Sequence[ScanMetrics], metric: str, i: int, j: int, grouping: str = "per-scan"
) -> PairedSample:
    """Values at grid positions ``i`` and ``j`` paired by unit, NaN pairs dropped."""
    labels, values = unit_values(metrics, metric, grouping)
    keep = ~(np.isnan(values[:, i]) | np.isnan(values[:, j]))
    return PairedSample(
        tuple(l for l, k in zip(labels, keep) if k), values[keep, i], values[keep, j]
    )


def pvalue_matrix(
    metrics: Sequence[ScanMetrics], metric: str, grouping: str = "per-scan"
) -> PValueMatrix:
    """Wilcoxon p-value for every pair of grid thresholds on one metric."""
    if metric not in ("abs_pct_diff", "mean_dsc"):
        raise ValueError(f"p-value matrix metric must be abs_pct_diff or mean_dsc, got {metric!r}")
    if not metrics:
        raise ValueError("no scan metrics")
    ts = metrics[0].thresholds
    if len(ts) < 2:
        raise ValueError("p-value matrix needs at least two thresholds")
    k = len(ts)
    out = np.full((k, k), np.nan)
    notes = []
    for i in range(k):
        for j in range(i + 1, k):
            try:
                ps = paired_sample(metrics, metric, i, j, grouping)
                p = wilcoxon_signed_rank(ps.a, ps.b).p_value
            except (DegenerateSampleError, ValueError) as exc:
                notes.append(f"{metric} {fmt(ts[i])} vs {fmt(ts[j])}: {exc}")
                continue
            out[i, j] = out[j, i] = p
    return PValueMatrix(metric, tuple(ts), out, tuple(notes))


# --------------------------------------------------------------------------
# Bland-Altman


@dataclass(frozen=True)
class BlandAltmanResult:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    within_band_count: int
    band_halfwidth: float
    n: int
    excluded: int
    differences: tuple[float, ...] = ()
    averages: tuple[float, ...] = ()  # mean of the paired volumes (plot x-axis)
    labels: tuple[str, ...] = ()


def agreement_limits(differences: Sequence[float], band_halfwidth: float = 5.0):
    """(mean, sample SD, low LOA, high LOA, count within +/- band)."""
    d = [float(x) for x in differences]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("no differences to analyse")
    # fsum makes the result independent of input order
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in d) / (n - 1)) if n > 1 else 0.0
    inside = sum(1 for x in d if abs(x) <= band_halfwidth)
    return mean, sd, mean - LOA_Z * sd, mean + LOA_Z * sd, inside


def bland_altman(
    v_ref: Sequence[float],
    v_pred: Sequence[float],
    convention: Convention = "ref",
    band_halfwidth: float = 5.0,
    labels: Sequence[str] | None = None,
) -> BlandAltmanResult:
    """Agreement of predicted vs reference volumes as relative % differences.

    Pairs whose difference is undefined (zero denominator) are skipped and
    counted in ``excluded``.
    """
    if len(v_ref) != len(v_pred):
        raise ValueError("reference and predicted volume lists differ in length")
    if labels is None:
        labels = [str(k) for k in range(len(v_ref))]
    diffs, avgs, kept = [], [], []
    excluded = 0
    for lab, r, p in zip(labels, v_ref, v_pred):
        try:
            diffs.append(percent_volume_difference(r, p, convention, True, lab))
        except UndefinedMetricError:
            excluded += 1
            continue
        avgs.append((r + p) / 2.0)
        kept.append(lab)
    mean, sd, lo, hi, inside = agreement_limits(diffs, band_halfwidth)
    return BlandAltmanResult(
        mean_diff=mean,
        sd_diff=sd,
        loa_low=lo,
        loa_high=hi,
        within_band_count=inside,
        band_halfwidth=float(band_halfwidth),
        n=len(diffs),
        excluded=excluded,
        differences=tuple(diffs),
        averages=tuple(avgs),
        labels=tuple(kept),
    )


def bland_altman_csv_text(result: BlandAltmanResult, threshold: float | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("quantity", "value"))
    if threshold is not None:
        w.writerow(("threshold", fmt(threshold)))
    for name in ("n", "excluded", "mean_diff", "sd_diff", "loa_low", "loa_high",
                 "band_halfwidth", "within_band_count"):
        w.writerow((name, fmt(getattr(result, name))))
    w.writerow(())
    w.writerow(("label", "mean_volume", "pct_difference"))
    for lab, a, d in sorted(zip(result.labels, result.averages, result.differences)):
        w.writerow((lab, fmt(a), fmt(d)))
    return buf.getvalue()
