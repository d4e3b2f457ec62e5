"""Binarization and the two figures of merit: tumor volume and Dice overlap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from segsweep.errors import GeometryError, UndefinedMetricError
from segsweep.model import (
    ProbabilityRaster,
    ReferenceMask,
    ScanRecord,
    inter_section_distances,
)

Convention = Literal["ref", "mean"]
CONVENTIONS: tuple[str, ...] = ("ref", "mean")


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grids: Mapping[int, np.ndarray]
    threshold_used: float | str  # a probability, or "reference"


@dataclass(frozen=True)
class VolumeResult:
    scan_id: str
    threshold: float | str
    volume: float  # mm^3
    per_section_pixel_counts: tuple[int, ...]


@dataclass(frozen=True)
class DscSummary:
    mean: float
    median: float
    per_section: tuple[float | None, ...]
    excluded: int  # sections where both masks are empty


def check_threshold(threshold: float) -> float:
    t = float(threshold)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold!r}")
    return t


def binarize(prob: ProbabilityRaster, threshold: float) -> BinaryMask:
    """Label a pixel tumor iff its probability is >= ``threshold``."""
    t = np.float64(check_threshold(threshold))
    grids = {}
    for i, g in prob.grids.items():
        m = g >= t  # float64 scalar forces a float64 comparison
        m.flags.writeable = False
        grids[i] = m
    return BinaryMask(grids, float(t))


def reference_mask(ref: ReferenceMask) -> BinaryMask:
    return BinaryMask(ref.grids, "reference")


def section_volume(count: int, pixel_spacing: float, distance: float) -> float:
    return float(count) * pixel_spacing * pixel_spacing * distance


def tumor_volume(
    mask: BinaryMask,
    scan: ScanRecord,
    sections: Sequence[int] | None = None,
    fallback_thickness: float | None = None,
) -> VolumeResult:
    """Sum of pixel count x spacing^2 x inter-section distance.

    ``sections`` restricts the sum to a subset of reviewed sections; their
    distances are still taken from the full reviewed sequence.
    """
    distances = dict(inter_section_distances(scan, fallback_thickness))
    chosen = list(scan.reviewed_indices) if sections is None else list(sections)
    counts = []
    volume = 0.0
    for i in chosen:
        if i not in distances:
            raise GeometryError(f"scan {scan.scan_id}: section {i} is not a reviewed section")
        g = mask.grids.get(i)
        geom = scan.section(i)
        if g is None:
            raise GeometryError(f"scan {scan.scan_id}, section {i}: mask has no grid")
        if g.shape != geom.shape:
            raise GeometryError(
                f"scan {scan.scan_id}, section {i}: mask {g.shape[0]}x{g.shape[1]} "
                f"vs geometry {geom.rows}x{geom.cols}"
            )
        n = int(np.count_nonzero(g))
        counts.append(n)
        volume += section_volume(n, geom.pixel_spacing, distances[i])
    return VolumeResult(scan.scan_id, mask.threshold_used, volume, tuple(counts))


def dice_from_counts(n_a: int, n_b: int, n_both: int) -> float | None:
    if n_a + n_b == 0:
        return None
    return 2.0 * n_both / (n_a + n_b)


def dsc(a: np.ndarray, b: np.ndarray) -> float | None:
    """Dice coefficient of two boolean grids; ``None`` when both are empty."""
    if a.shape != b.shape:
        raise GeometryError(f"DSC of mismatched grids {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    return dice_from_counts(
        int(np.count_nonzero(a)), int(np.count_nonzero(b)), int(np.count_nonzero(a & b))
    )


def summarize_dsc(values: Sequence[float | None], scan_id: str = "?") -> DscSummary:
    defined = np.array([v for v in values if v is not None], dtype=float)
    if defined.size == 0:
        raise UndefinedMetricError(
            f"scan {scan_id}: no comparable sections (every section empty in both masks)"
        )
    return DscSummary(
        mean=float(np.mean(defined)),
        median=float(np.median(defined)),
        per_section=tuple(values),
        excluded=len(values) - int(defined.size),
    )


def scan_dsc(
    pred: BinaryMask,
    ref: ReferenceMask | BinaryMask,
    sections: Sequence[int] | None = None,
    scan_id: str | None = None,
) -> DscSummary:
    """Per-section DSC, averaged over sections where it is defined."""
    if scan_id is None:
        scan_id = getattr(ref, "scan_id", "?")
    if sections is None:
        if set(pred.grids) != set(ref.grids):
            raise GeometryError(f"scan {scan_id}: prediction and reference cover different sections")
        sections = list(ref.grids)
    values = []
    for i in sections:
        if i not in pred.grids or i not in ref.grids:
            raise GeometryError(f"scan {scan_id}, section {i}: missing from one of the masks")
        values.append(dsc(pred.grids[i], ref.grids[i]))
    return summarize_dsc(values, scan_id)


def percent_volume_difference(
    v_ref: float,
    v_pred: float,
    convention: Convention = "ref",
    signed: bool = True,
    scan_id: str | None = None,
) -> float:
    """100 x (ref - pred) / denominator; positive means the prediction is smaller.

    ``convention="ref"`` divides by the reference volume, ``"mean"`` by the
    mean of both volumes.
    """
    if convention == "ref":
        denom = v_ref
    elif convention == "mean":
        denom = (v_ref + v_pred) / 2.0
    else:
        raise ValueError(f"unknown percent-difference convention {convention!r}")
    if denom == 0:
        who = f"scan {scan_id}: " if scan_id else ""
        raise UndefinedMetricError(f"{who}undefined difference (zero {convention} denominator)")
    d = 100.0 * (v_ref - v_pred) / denom
    return d if signed else abs(d)
