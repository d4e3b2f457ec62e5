"""Command-line entry point: ``segsweep {phantom,sweep,stats,validate}``.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import Sequence

from segsweep import plots
from segsweep.errors import DegenerateSampleError, SegSweepError
from segsweep.metrics import CONVENTIONS
from segsweep.model import load_manifest, validate_scan
from segsweep.phantom import CohortBias, draw_scan_counts, even_scan_counts, generate_cohort
from segsweep.stats import (
    bland_altman,
    bland_altman_csv_text,
    ks_normality,
    pvalue_matrix,
)
from segsweep.sweep import (
    DEFAULT_THRESHOLDS,
    GROUPINGS,
    REGIONS,
    SweepValidationError,
    ThresholdGrid,
    aggregate,
    fmt,
    optimal_histogram,
    optimal_thresholds,
    read_scan_metrics_csv,
    run_sweep,
    unit_values,
    write_scan_metrics_csv,
)


def _grid(text: str) -> ThresholdGrid:
    try:
        return ThresholdGrid.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"{text} is not positive")
    return v


def _out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args: argparse.Namespace) -> int:
    if args.scans_total is not None:
        counts = even_scan_counts(args.patients, args.scans_total)
    else:
        if args.scans_max < args.scans_min:
            raise SegSweepError("--scans-max must be >= --scans-min")
        counts = draw_scan_counts(args.patients, args.scans_min, args.scans_max, args.seed)
    bias = CohortBias(
        undersegmentation=args.bias_underseg,
        effusion_prob=args.effusion_prob,
        effusion_level=args.effusion_level,
        fissure_prob=args.fissure_prob,
    )
    cohort = generate_cohort(args.out, args.patients, counts, bias, args.seed,
                             rows=args.size, cols=args.size, n_sections=args.sections)
    print(cohort.manifest_path)
    return 0


def _sweep_metrics(manifest_path, grid, region, convention, threads):
    manifest = load_manifest(manifest_path)
    return run_sweep(manifest, grid, region, convention, threads)


def cmd_sweep(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    metrics = _sweep_metrics(args.manifest, args.grid, args.region, args.convention, args.threads)
    report = aggregate(metrics, args.group, args.region)
    report.write_csv(out / "sweep_report.csv")
    write_scan_metrics_csv(metrics, out / "per_scan_metrics.csv")

    labels = [fmt(t) for t in args.grid]
    _, dsc = unit_values(metrics, "mean_dsc", args.group)
    _write(out / "dsc_boxplot.svg", plots.boxplot_svg(
        labels, [dsc[:, k] for k in range(len(labels))],
        f"DSC by threshold ({args.group}, {args.region})"))

    hist = optimal_histogram(metrics)
    _write(out / "optimal_histogram.svg", plots.histogram_svg(
        labels,
        {"percent volume difference": [hist["volume"][t] for t in args.grid],
         "DSC": [hist["dsc"][t] for t in args.grid]},
        "Per-scan optimal thresholds"))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scan_id", "patient_id", "t_volume", "t_dsc"))
    for m in sorted(metrics, key=lambda m: (m.patient_id, m.scan_id)):
        opt = optimal_thresholds(m)
        w.writerow((m.scan_id, m.patient_id,
                    "" if opt.t_volume is None else fmt(opt.t_volume),
                    "" if opt.t_dsc is None else fmt(opt.t_dsc)))
    _write(out / "optimal_thresholds.csv", buf.getvalue())

    print(report.csv_text(), end="")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    if args.metrics is not None:
        metrics = read_scan_metrics_csv(args.metrics)
    else:
        metrics = _sweep_metrics(args.manifest, args.grid, args.region, args.convention,
                                 args.threads)
    if not metrics:
        raise SegSweepError("no scan metrics found")

    for name, fname in (("abs_pct_diff", "pvalue_matrix_volume.csv"),
                        ("mean_dsc", "pvalue_matrix_dsc.csv")):
        mat = pvalue_matrix(metrics, name, args.group)
        mat.write_csv(out / fname)
        for note in mat.notes:
            _warn(f"n/a cell: {note}")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "threshold", "n", "statistic", "p_value", "reject_at_0.05"))
    ts = metrics[0].thresholds
    for name in ("abs_pct_diff", "mean_dsc"):
        _, values = unit_values(metrics, name, args.group)
        for k, t in enumerate(ts):
            col = values[:, k]
            col = col[col == col]
            try:
                r = ks_normality(col, standardize=not args.ks_raw)
                w.writerow((name, fmt(t), r.n, fmt(r.statistic), fmt(r.p_value),
                            "true" if r.reject else "false"))
            except DegenerateSampleError as exc:
                _warn(f"KS {name} at {fmt(t)}: {exc}")
                w.writerow((name, fmt(t), len(col), "n/a", "n/a", "n/a"))
    _write(out / "ks_normality.csv", buf.getvalue())

    t = args.threshold
    if t not in ts:
        raise SegSweepError(f"Bland-Altman threshold {t} is not on the metrics grid")
    ordered = sorted(metrics, key=lambda m: (m.patient_id, m.scan_id))
    rows = [m.at(t) for m in ordered]
    ba = bland_altman([r.volume_ref for r in rows], [r.volume_pred for r in rows],
                      args.convention, args.band, [m.scan_id for m in ordered])
    if ba.excluded:
        _warn(f"Bland-Altman: {ba.excluded} scan(s) with undefined difference excluded")
    _write(out / "bland_altman.csv", bland_altman_csv_text(ba, t))
    _write(out / "bland_altman.svg", plots.bland_altman_svg(
        ba, f"Bland-Altman at threshold {fmt(t)} ({args.convention} denominator)"))
    print(f"Bland-Altman (t={fmt(t)}): mean {ba.mean_diff:.2f}%, "
          f"LOA [{ba.loa_low:.2f}, {ba.loa_high:.2f}]%, "
          f"{ba.within_band_count}/{ba.n} within ±{args.band:g}%")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    problems = []
    for e in manifest:
        problems += validate_scan(e.scan, e.load_probability(), e.load_reference())
    for p in problems:
        print(p)
    if problems:
        return 1
    n_pat = len(manifest.by_patient())
    print(f"ok: {len(manifest)} scans from {n_pat} patients")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segsweep",
        description="Threshold-sweep evaluation of probabilistic tumor segmentations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom cohort")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patients", type=int, default=21)
    p.add_argument("--scans-min", type=int, default=3)
    p.add_argument("--scans-max", type=int, default=6)
    p.add_argument("--scans-total", type=int, default=None,
                   help="spread exactly this many scans over the patients")
    p.add_argument("--bias-underseg", type=_positive, default=0.5625,
                   help="t=0.5 disk area as a fraction of the reference area")
    p.add_argument("--effusion-prob", type=_unit_interval, default=0.15)
    p.add_argument("--effusion-level", type=float, default=0.3)
    p.add_argument("--fissure-prob", type=_unit_interval, default=1.0)
    p.add_argument("--size", type=int, default=512, help="rows and cols per section")
    p.add_argument("--sections", type=int, default=50, help="reviewed sections per scan")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    def common(q: argparse.ArgumentParser) -> None:
        q.add_argument("--grid", type=_grid, default=ThresholdGrid(DEFAULT_THRESHOLDS),
                       help="comma-separated thresholds in (0, 1]")
        q.add_argument("--group", choices=GROUPINGS, default="per-scan")
        q.add_argument("--region", choices=REGIONS, default="whole")
        q.add_argument("--convention", choices=CONVENTIONS, default="ref")
        q.add_argument("--threads", type=int, default=None,
                       help="worker count (default: $SEGSWEEP_THREADS or CPU count)")
        q.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="evaluate every scan over a threshold grid")
    p.add_argument("--manifest", type=Path, required=True)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="Wilcoxon matrices, KS checks and Bland-Altman")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--metrics", type=Path, help="per_scan_metrics.csv from a sweep")
    src.add_argument("--manifest", type=Path)
    common(p)
    p.add_argument("--band", type=float, default=5.0, help="Bland-Altman band half-width (%%)")
    p.add_argument("--threshold", type=float, default=0.5, help="Bland-Altman threshold")
    p.add_argument("--ks-raw", action="store_true", help="KS test on unstandardized values")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check a manifest and its rasters")
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SweepValidationError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return 1
    except (SegSweepError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
