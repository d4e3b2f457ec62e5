"""Threshold sweep: per-scan metrics over a grid, cohort aggregation, optima."""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from segsweep.errors import (
    ConfigurationError,
    GeometryError,
    UndefinedMetricError,
    ValidationError,
)
from segsweep.metrics import (
    Convention,
    dice_from_counts,
    percent_volume_difference,
    reference_mask,
    section_volume,
    summarize_dsc,
    tumor_volume,
)
from segsweep.model import (
    DatasetManifest,
    ManifestEntry,
    ProbabilityRaster,
    ReferenceMask,
    ScanRecord,
    Violation,
    inter_section_distances,
    validate_scan,
)

Region = Literal["whole", "subset"]
Grouping = Literal["per-scan", "per-patient"]
REGIONS: tuple[str, ...] = ("whole", "subset")
GROUPINGS: tuple[str, ...] = ("per-scan", "per-patient")

DEFAULT_THRESHOLDS = (0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
# compact grid for summary tables
TABLE_THRESHOLDS = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5)

SCAN_METRIC_FIELDS = (
    "volume_pred",
    "volume_ref",
    "signed_pct_diff",
    "abs_pct_diff",
    "mean_dsc",
    "median_dsc",
    "excluded_sections",
)
REPORT_COLUMNS = (
    "threshold",
    "mean_abs_pct_diff",
    "sd_abs_pct_diff",
    "mean_dsc",
    "sd_dsc",
    "median_dsc",
    "iqr_dsc",
    "n",
)


def fmt(x: float) -> str:
    """CSV number formatting: 6 significant digits, locale independent."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.6g}"


@dataclass(frozen=True)
class ThresholdGrid:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        ts = tuple(float(t) for t in self.thresholds)
        if not ts:
            raise ValueError("threshold grid is empty")
        for t in ts:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"grid threshold {t} outside (0, 1]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("grid thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", ts)

    @classmethod
    def parse(cls, text: str) -> ThresholdGrid:
        try:
            values = [float(tok) for tok in text.split(",") if tok.strip()]
        except ValueError as exc:
            raise ValueError(f"cannot parse threshold grid {text!r}") from exc
        return cls(tuple(values))

    def __len__(self) -> int:
        return len(self.thresholds)

    def __iter__(self):
        return iter(self.thresholds)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=np.float64)


@dataclass(frozen=True)
class ThresholdMetrics:
    threshold: float
    volume_pred: float
    volume_ref: float
    signed_pct_diff: float  # nan when undefined
    abs_pct_diff: float
    mean_dsc: float
    median_dsc: float
    excluded_sections: int


@dataclass(frozen=True)
class ScanMetrics:
    scan_id: str
    patient_id: str
    rows: tuple[ThresholdMetrics, ...]

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(r.threshold for r in self.rows)

    def series(self, name: str) -> np.ndarray:
        if name not in SCAN_METRIC_FIELDS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def at(self, threshold: float) -> ThresholdMetrics:
        for r in self.rows:
            if r.threshold == threshold:
                return r
        raise KeyError(threshold)


@dataclass(frozen=True)
class ReportRow:
    threshold: float
    mean_abs_pct_diff: float
    sd_abs_pct_diff: float
    mean_dsc: float
    sd_dsc: float
    median_dsc: float
    iqr_dsc: float
    n: int


@dataclass(frozen=True)
class SweepReport:
    grid: ThresholdGrid
    rows: tuple[ReportRow, ...]
    grouping: str
    region: str

    def row(self, threshold: float) -> ReportRow:
        for r in self.rows:
            if r.threshold == threshold:
                return r
        raise KeyError(threshold)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([fmt(getattr(r, c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.csv_text(), encoding="utf-8")


@dataclass(frozen=True)
class OptimalThresholds:
    t_volume: float | None
    t_dsc: float | None


# --------------------------------------------------------------------------
# region selection


def subset_sections(scan: ScanRecord) -> list[int]:
    """Reviewed indices inside the scan's inclusive subset range, in order."""
    if scan.subset_range is None:
        raise ConfigurationError(f"scan {scan.scan_id}: no subset_range defined")
    sup, inf = scan.subset_range
    chosen = [i for i in scan.reviewed_indices if sup <= i <= inf]
    if not chosen:
        raise ConfigurationError(
            f"scan {scan.scan_id}: empty subset, no reviewed section within [{sup}, {inf}]"
        )
    return chosen


def region_sections(scan: ScanRecord, region: str) -> list[int]:
    if region == "whole":
        return list(scan.reviewed_indices)
    if region == "subset":
        return subset_sections(scan)
    raise ValueError(f"unknown region {region!r}")


# --------------------------------------------------------------------------
# per-scan evaluation


def threshold_counts(
    prob: np.ndarray, ref: np.ndarray, thresholds: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted and overlapping pixel counts at every threshold in one pass.

    For each pixel, the number of grid thresholds <= p is the number of grid
    masks containing it, so a reversed cumulative histogram of that number
    gives |{p >= t}| for every t at once.
    """
    n_t = len(thresholds)
    level = np.searchsorted(thresholds, prob.ravel(), side="right")
    hist = np.bincount(level, minlength=n_t + 1)
    hist_in = np.bincount(level[ref.ravel()], minlength=n_t + 1)
    pred = np.cumsum(hist[::-1])[::-1][1:]
    inter = np.cumsum(hist_in[::-1])[::-1][1:]
    return pred, inter


def evaluate_scan(
    scan: ScanRecord,
    prob: ProbabilityRaster,
    ref: ReferenceMask,
    grid: ThresholdGrid,
    region: str = "whole",
    convention: Convention = "ref",
    fallback_thickness: float | None = None,
) -> ScanMetrics:
    """Volume and DSC of one scan at every grid threshold."""
    if region == "subset" and scan.subset_range is None:
        raise ConfigurationError(
            f"scan {scan.scan_id}: region 'subset' requested but the scan has no subset_range"
        )
    sections = region_sections(scan, region)
    distances = dict(inter_section_distances(scan, fallback_thickness))
    thresholds = grid.as_array()
    n_t = len(thresholds)

    v_ref = tumor_volume(reference_mask(ref), scan, sections, fallback_thickness).volume

    volumes = [0.0] * n_t
    per_section_dsc: list[list[float | None]] = [[] for _ in range(n_t)]
    for i in sections:
        geom = scan.section(i)
        p = prob.grids.get(i)
        m = ref.grids.get(i)
        if p is None or m is None:
            raise GeometryError(f"scan {scan.scan_id}, section {i}: missing raster grid")
        if p.shape != geom.shape or m.shape != geom.shape:
            raise GeometryError(f"scan {scan.scan_id}, section {i}: grid/geometry mismatch")
        pred, inter = threshold_counts(p, m, thresholds)
        n_ref = int(np.count_nonzero(m))
        for k in range(n_t):
            volumes[k] += section_volume(int(pred[k]), geom.pixel_spacing, distances[i])
            per_section_dsc[k].append(dice_from_counts(int(pred[k]), n_ref, int(inter[k])))

    rows = []
    for k, t in enumerate(grid.thresholds):
        try:
            signed = percent_volume_difference(v_ref, volumes[k], convention, True, scan.scan_id)
        except UndefinedMetricError:
            signed = math.nan
        try:
            summary = summarize_dsc(per_section_dsc[k], scan.scan_id)
            mean_d, median_d, excluded = summary.mean, summary.median, summary.excluded
        except UndefinedMetricError:
            mean_d, median_d, excluded = math.nan, math.nan, len(sections)
        rows.append(ThresholdMetrics(
            threshold=t,
            volume_pred=volumes[k],
            volume_ref=v_ref,
            signed_pct_diff=signed,
            abs_pct_diff=abs(signed),
            mean_dsc=mean_d,
            median_dsc=median_d,
            excluded_sections=excluded,
        ))
    return ScanMetrics(scan.scan_id, scan.patient_id, tuple(rows))


def monotonicity_violations(metrics: ScanMetrics) -> list[tuple[float, float]]:
    """Adjacent (t_low, t_high) pairs where the predicted volume grew with t."""
    out = []
    for lo, hi in zip(metrics.rows, metrics.rows[1:]):
        if hi.volume_pred > lo.volume_pred:
            out.append((lo.threshold, hi.threshold))
    return out


# --------------------------------------------------------------------------
# cohort aggregation


def _sorted(metrics: Iterable[ScanMetrics]) -> list[ScanMetrics]:
    return sorted(metrics, key=lambda m: (m.patient_id, m.scan_id))


def _check_grid(metrics: Sequence[ScanMetrics]) -> tuple[float, ...]:
    if not metrics:
        raise ValueError("no scan metrics to aggregate")
    ts = metrics[0].thresholds
    for m in metrics[1:]:
        if m.thresholds != ts:
            raise ValueError(
                f"mixed threshold grids: scan {m.scan_id} differs from {metrics[0].scan_id}"
            )
    return ts


def _nanmean_rows(block: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(block, axis=0)


def unit_values(
    metrics: Sequence[ScanMetrics], name: str, grouping: str
) -> tuple[list[str], np.ndarray]:
    """Per-unit values of one metric, shape (units, thresholds).

    Units are scans, or patients whose value is the mean over their scans.
    Rows are ordered by patient then scan id so results do not depend on
    input order.
    """
    ordered = _sorted(metrics)
    if grouping == "per-scan":
        return [m.scan_id for m in ordered], np.array([m.series(name) for m in ordered])
    if grouping == "per-patient":
        groups: dict[str, list[ScanMetrics]] = defaultdict(list)
        for m in ordered:
            groups[m.patient_id].append(m)
        labels = sorted(groups)
        values = [_nanmean_rows(np.array([m.series(name) for m in groups[p]])) for p in labels]
        return labels, np.array(values)
    raise ValueError(f"unknown grouping {grouping!r}")


def describe(values: np.ndarray) -> tuple[float, float, float, float]:
    """(mean, sample SD, median, IQR) ignoring NaN; SD is 0 for one value."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return (math.nan,) * 4
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return mean, sd, float(med), float(q3 - q1)


def aggregate(
    metrics: Sequence[ScanMetrics], grouping: str = "per-scan", region: str = "whole"
) -> SweepReport:
    """Cohort summary per threshold: mean/SD of |% volume diff| and DSC stats."""
    ts = _check_grid(list(metrics))
    _, vol = unit_values(metrics, "abs_pct_diff", grouping)
    _, dsc = unit_values(metrics, "mean_dsc", grouping)
    rows = []
    for k, t in enumerate(ts):
        mv, sv, _, _ = describe(vol[:, k])
        md, sd, med, iqr = describe(dsc[:, k])
        rows.append(ReportRow(t, mv, sv, md, sd, med, iqr, int(vol.shape[0])))
    return SweepReport(ThresholdGrid(ts), tuple(rows), grouping, region)


def _argbest(values: np.ndarray, thresholds: Sequence[float], maximize: bool) -> float | None:
    best = None
    best_t = None
    for v, t in zip(values, thresholds):
        if math.isnan(v):
            continue
        # >= / <= so that ties move to the larger threshold
        if best is None or (v >= best if maximize else v <= best):
            best, best_t = v, t
    return best_t


def optimal_thresholds(metrics: ScanMetrics) -> OptimalThresholds:
    """Grid threshold minimizing |% volume diff| and maximizing mean DSC.

    Ties go to the largest threshold.
    """
    ts = metrics.thresholds
    return OptimalThresholds(
        t_volume=_argbest(metrics.series("abs_pct_diff"), ts, maximize=False),
        t_dsc=_argbest(metrics.series("mean_dsc"), ts, maximize=True),
    )


def optimal_histogram(metrics: Sequence[ScanMetrics]) -> dict[str, dict[float, int]]:
    """How often each grid threshold is a scan's optimum, per figure of merit.

    Scans whose optimum is undefined (all values NaN) are not counted.
    """
    ts = _check_grid(list(metrics))
    hist = {"volume": {t: 0 for t in ts}, "dsc": {t: 0 for t in ts}}
    for m in metrics:
        opt = optimal_thresholds(m)
        if opt.t_volume is not None:
            hist["volume"][opt.t_volume] += 1
        if opt.t_dsc is not None:
            hist["dsc"][opt.t_dsc] += 1
    return hist


# --------------------------------------------------------------------------
# manifest-level driver


def worker_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("SEGSWEEP_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigurationError(f"SEGSWEEP_THREADS must be an integer, got {env!r}")
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, threads)


class SweepValidationError(ValidationError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("\n".join(str(v) for v in self.violations))


def run_sweep(
    manifest: DatasetManifest,
    grid: ThresholdGrid,
    region: str = "whole",
    convention: Convention = "ref",
    threads: int | None = None,
    validate: bool = True,
    on_scan: Callable[[ScanMetrics], None] | None = None,
) -> list[ScanMetrics]:
    """Evaluate every manifest scan; results are in manifest order."""
    if region == "subset":
        missing = [e.scan.scan_id for e in manifest if e.scan.subset_range is None]
        if missing:
            raise ConfigurationError(
                f"region 'subset' requested but scans lack subset_range: {', '.join(missing)}"
            )

    def work(entry: ManifestEntry) -> tuple[ScanMetrics | None, list[Violation]]:
        prob = entry.load_probability()
        ref = entry.load_reference()
        if validate:
            problems = validate_scan(entry.scan, prob, ref)
            if problems:
                return None, problems
        m = evaluate_scan(entry.scan, prob, ref, grid, region, convention)
        if on_scan is not None:
            on_scan(m)
        return m, []

    n = worker_count(threads)
    if n == 1:
        results = [work(e) for e in manifest]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(work, manifest.entries))
    problems = [v for _, vs in results for v in vs]
    if problems:
        raise SweepValidationError(problems)
    return [m for m, _ in results]


# --------------------------------------------------------------------------
# serialization


def scan_metrics_csv_text(metrics: Sequence[ScanMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scan_id", "patient_id", "threshold", "metric", "value"))
    for m in _sorted(metrics):
        for r in m.rows:
            for name in SCAN_METRIC_FIELDS:
                w.writerow((m.scan_id, m.patient_id, fmt(r.threshold), name,
                            fmt(getattr(r, name))))
    return buf.getvalue()


def write_scan_metrics_csv(metrics: Sequence[ScanMetrics], path: str | Path) -> None:
    Path(path).write_text(scan_metrics_csv_text(metrics), encoding="utf-8")


def read_scan_metrics_csv(path: str | Path) -> list[ScanMetrics]:
    """Inverse of :func:`write_scan_metrics_csv` (values at CSV precision)."""
    table: dict[tuple[str, str], dict[float, dict[str, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"scan_id", "patient_id", "threshold", "metric", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: not a per-scan metrics CSV")
        for line, rec in enumerate(reader, start=2):
            try:
                t = float(rec["threshold"])
                value = float(rec["value"])
            except ValueError as exc:
                raise ValueError(f"{path}: line {line}: {exc}") from exc
            key = (rec["patient_id"], rec["scan_id"])
            table.setdefault(key, {}).setdefault(t, {})[rec["metric"]] = value
    out = []
    for (patient, scan), by_t in table.items():
        rows = []
        for t in sorted(by_t):
            vals = by_t[t]
            missing = [f for f in SCAN_METRIC_FIELDS if f not in vals]
            if missing:
                raise ValueError(f"{path}: scan {scan} threshold {t} lacks {missing}")
            rows.append(ThresholdMetrics(
                threshold=t,
                **{f: vals[f] for f in SCAN_METRIC_FIELDS if f != "excluded_sections"},
                excluded_sections=int(vals["excluded_sections"]),
            ))
        out.append(ScanMetrics(scan, patient, tuple(rows)))
    return out
