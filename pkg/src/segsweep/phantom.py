"""Synthetic scans whose thresholded volume and overlap are known in closed form.

Each phantom section holds a radial probability cone, p = 1 - d / R_p
(clipped to [0, 1]), so thresholding at t keeps a disk of radius
R_p * (1 - t).  The reference is a plain disk.  Two optional error modes
perturb the cone:

* effusion: a disk where probability is raised to a plateau level, giving
  false positives that only appear at thresholds <= that level;
* fissure gap: a band of rows whose probability is zeroed (or attenuated),
  giving false negatives at every threshold.

A pixel belongs to a disk iff its center lies within the radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from segsweep.model import (
    DatasetManifest,
    ManifestEntry,
    ProbabilityRaster,
    ReferenceMask,
    ScanRecord,
    SectionGeometry,
    write_manifest,
    write_probability,
    write_reference,
)

# below this thresholded radius, rasterization error exceeds the oracle tolerances
MIN_VERIFIED_RADIUS = 15.0
VOLUME_REL_TOL = 0.02
DSC_ABS_TOL = 0.02


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Effusion:
    center: tuple[float, float]
    radius: float
    level: float = 0.3


@dataclass(frozen=True)
class FissureGap:
    start_row: int
    stop_row: int  # exclusive
    zero: bool = True
    attenuation: float = 0.5  # multiplier applied when zero is False


@dataclass(frozen=True)
class PhantomSpec:
    rows: int
    cols: int
    n_sections: int  # reviewed sections
    pixel_spacing: float  # mm
    section_distance: float  # mm between reviewed sections
    cone_center: tuple[float, float]
    cone_radius: float  # px; probability reaches 0 here
    ref_radius: float  # px
    ref_center: tuple[float, float]
    effusion: Effusion | None = None
    gap: FissureGap | None = None
    seed: int = 0
    review_every: int = 1  # acquired sections per reviewed section
    table_origin: float = 0.0
    subset_range: tuple[int, int] | None = None
    scan_id: str = "phantom"
    patient_id: str = "phantom"

    def __post_init__(self):
        problems = spec_problems(self)
        if problems:
            raise PhantomSpecError("; ".join(problems))


def _disk_fits(center, radius, rows, cols) -> bool:
    r, c = center
    return r - radius >= 0 and c - radius >= 0 and r + radius <= rows - 1 and c + radius <= cols - 1


def spec_problems(spec: PhantomSpec) -> list[str]:
    out = []
    if spec.rows <= 0 or spec.cols <= 0:
        out.append("rows and cols must be positive")
    if spec.n_sections < 1:
        out.append("n_sections must be >= 1")
    if not spec.pixel_spacing > 0 or not spec.section_distance > 0:
        out.append("pixel_spacing and section_distance must be positive")
    if spec.review_every < 1:
        out.append("review_every must be >= 1")
    if not spec.cone_radius > 0 or not spec.ref_radius > 0:
        out.append("cone_radius and ref_radius must be positive")
    elif spec.rows > 0 and spec.cols > 0:
        if not _disk_fits(spec.cone_center, spec.cone_radius, spec.rows, spec.cols):
            out.append("probability cone does not fit within the grid")
        if not _disk_fits(spec.ref_center, spec.ref_radius, spec.rows, spec.cols):
            out.append("reference disk does not fit within the grid")
    if spec.effusion is not None:
        e = spec.effusion
        if not 0 < e.level < 1:
            out.append("effusion level must lie in (0, 1)")
        if not e.radius > 0 or not _disk_fits(e.center, e.radius, spec.rows, spec.cols):
            out.append("effusion disk does not fit within the grid")
    if spec.gap is not None:
        g = spec.gap
        if not 0 <= g.start_row < g.stop_row <= spec.rows:
            out.append("fissure gap rows must satisfy 0 <= start < stop <= rows")
        if not g.zero and not 0 <= g.attenuation < 1:
            out.append("fissure attenuation must lie in [0, 1)")
    return out


# --------------------------------------------------------------------------
# rasterization


def _distance_grid(rows: int, cols: int, center: tuple[float, float]) -> np.ndarray:
    r = np.arange(rows, dtype=np.float64)[:, None] - center[0]
    c = np.arange(cols, dtype=np.float64)[None, :] - center[1]
    return np.sqrt(r * r + c * c)


def probability_grid(spec: PhantomSpec) -> np.ndarray:
    p = np.clip(1.0 - _distance_grid(spec.rows, spec.cols, spec.cone_center) / spec.cone_radius,
                0.0, 1.0)
    if spec.effusion is not None:
        e = spec.effusion
        inside = _distance_grid(spec.rows, spec.cols, e.center) <= e.radius
        p = np.where(inside, np.maximum(p, e.level), p)
    if spec.gap is not None:
        g = spec.gap
        p[g.start_row:g.stop_row, :] *= 0.0 if g.zero else g.attenuation
    return p.astype(np.float32)


def reference_grid(spec: PhantomSpec) -> np.ndarray:
    return _distance_grid(spec.rows, spec.cols, spec.ref_center) <= spec.ref_radius


def phantom_scan(spec: PhantomSpec) -> ScanRecord:
    k = spec.review_every
    thickness = spec.section_distance / k
    n_acquired = (spec.n_sections - 1) * k + 1
    sections = tuple(
        SectionGeometry(i, spec.table_origin + i * thickness, spec.pixel_spacing,
                        spec.rows, spec.cols)
        for i in range(n_acquired)
    )
    return ScanRecord(
        scan_id=spec.scan_id,
        patient_id=spec.patient_id,
        sections=sections,
        reviewed_indices=tuple(range(0, n_acquired, k)),
        subset_range=spec.subset_range,
    )


def generate(spec: PhantomSpec) -> tuple[ScanRecord, ProbabilityRaster, ReferenceMask]:
    """Scan record plus identical probability/reference grids on every reviewed section."""
    scan = phantom_scan(spec)
    p = probability_grid(spec)
    m = reference_grid(spec)
    p.flags.writeable = False
    m.flags.writeable = False
    prob = ProbabilityRaster(spec.scan_id, {i: p for i in scan.reviewed_indices})
    ref = ReferenceMask(spec.scan_id, {i: m for i in scan.reviewed_indices})
    return scan, prob, ref


# --------------------------------------------------------------------------
# closed-form oracles (plain cones: effusion and gap are ignored)


def thresholded_radius(spec: PhantomSpec, threshold: float) -> float:
    return spec.cone_radius * (1.0 - threshold)


def analytic_volume(spec: PhantomSpec, threshold: float) -> float:
    """Continuous volume (mm^3) of the thresholded cone over all reviewed sections."""
    r_mm = thresholded_radius(spec, threshold) * spec.pixel_spacing
    return spec.n_sections * math.pi * r_mm * r_mm * spec.section_distance


def circle_intersection_area(r1: float, r2: float, d: float) -> float:
    """Area of the lens shared by circles of radii r1, r2 with centers d apart."""
    if r1 <= 0 or r2 <= 0 or d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    k = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - k


def analytic_dsc(spec: PhantomSpec, threshold: float) -> float:
    r = thresholded_radius(spec, threshold)
    big_r = spec.ref_radius
    d = math.dist(spec.cone_center, spec.ref_center)
    if d == 0:
        return 2.0 * min(r, big_r) ** 2 / (r * r + big_r * big_r)
    lens = circle_intersection_area(r, big_r, d)
    return 2.0 * lens / (math.pi * r * r + math.pi * big_r * big_r)


def volume_matching_threshold(spec: PhantomSpec) -> float:
    """Threshold whose cone disk has the reference radius (may fall outside (0, 1))."""
    return 1.0 - spec.ref_radius / spec.cone_radius


# --------------------------------------------------------------------------
# cohorts


@dataclass(frozen=True)
class CohortBias:
    """Systematic errors injected into every cohort scan.

    ``undersegmentation`` is the ratio of the t=0.5 disk area to the
    reference area; the cone radius follows as 2 * R_ref * sqrt(f), which
    puts the volume-matching threshold at 1 - 1 / (2 sqrt(f)).
    """

    undersegmentation: float = 1.0
    effusion_prob: float = 0.0
    effusion_level: float = 0.3
    fissure_prob: float = 0.0
    fissure_width: tuple[float, float] = (0.15, 0.3)  # fraction of R_ref
    ref_offset: tuple[float, float] = (0.5, 0.7)  # fraction of R_ref, along rows

    def __post_init__(self):
        if not self.undersegmentation > 0:
            raise ValueError("undersegmentation factor must be > 0")
        for name in ("effusion_prob", "fissure_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.effusion_level < 1:
            raise ValueError("effusion_level must lie in (0, 1)")
        if not 0 <= self.ref_offset[0] <= self.ref_offset[1]:
            raise ValueError("ref_offset must be an ordered non-negative range")
        if not 0 < self.fissure_width[0] <= self.fissure_width[1]:
            raise ValueError("fissure_width must be an ordered positive range")

    @property
    def cone_ratio(self) -> float:
        return 2.0 * math.sqrt(self.undersegmentation)

    @property
    def matching_threshold(self) -> float:
        return 1.0 - 1.0 / self.cone_ratio


@dataclass(frozen=True)
class Cohort:
    manifest_path: Path
    manifest: DatasetManifest
    specs: tuple[PhantomSpec, ...] = field(repr=False)


def draw_scan_counts(n_patients: int, lo: int, hi: int, seed: int) -> list[int]:
    if n_patients < 1 or not 1 <= lo <= hi:
        raise ValueError("need n_patients >= 1 and 1 <= lo <= hi")
    rng = np.random.default_rng([seed, 1])
    return [int(x) for x in rng.integers(lo, hi + 1, size=n_patients)]


def even_scan_counts(n_patients: int, total: int) -> list[int]:
    """Spread ``total`` scans over patients as evenly as possible."""
    if n_patients < 1 or total < n_patients:
        raise ValueError("need at least one scan per patient")
    base, extra = divmod(total, n_patients)
    return [base + (1 if k < extra else 0) for k in range(n_patients)]


def cohort_specs(
    n_patients: int,
    scans_per_patient: int | Sequence[int],
    bias: CohortBias = CohortBias(),
    seed: int = 0,
    rows: int = 512,
    cols: int = 512,
    n_sections: int = 50,
) -> list[PhantomSpec]:
    """Per-scan phantom specs for a synthetic cohort, fully determined by ``seed``."""
    if isinstance(scans_per_patient, int):
        counts = [scans_per_patient] * n_patients
    else:
        counts = list(scans_per_patient)
    if n_patients < 1 or len(counts) != n_patients or min(counts) < 1:
        raise ValueError("need n_patients >= 1 and at least one scan per patient")

    rng = np.random.default_rng([seed, 0])
    size = min(rows, cols)
    specs = []
    for p, n_scans in enumerate(counts):
        patient = f"P{p + 1:03d}"
        for s in range(n_scans):
            r_ref = float(rng.uniform(0.04, 0.1) * size)
            r_cone = bias.cone_ratio * r_ref
            center = ((rows - 1) / 2 + rng.uniform(-3, 3), (cols - 1) / 2 + rng.uniform(-3, 3))
            # integer offset keeps the two disks' pixel counts comparable
            offset = round(rng.uniform(*bias.ref_offset) * r_ref)
            ref_center = (center[0] + offset, center[1])
            spacing = round(float(rng.uniform(0.6, 0.9)), 4)
            thickness = float(rng.choice([1.25, 2.5, 5.0]))
            review_every = int(round(5.0 / thickness))

            effusion = None
            if rng.random() < bias.effusion_prob:
                e_r = 0.4 * r_ref
                e_dist = max(1.6 * r_ref, 0.8 * r_cone + e_r)
                effusion = Effusion((center[0], center[1] - e_dist), e_r, bias.effusion_level)
            gap = None
            if rng.random() < bias.fissure_prob:
                start = math.floor(center[0] + 0.5 * r_cone) + 1  # clear of the t=0.5 disk
                width = max(1, round(rng.uniform(*bias.fissure_width) * r_ref))
                gap = FissureGap(start, min(rows, start + width))

            margin = max(1, n_sections // 5)
            first, last = 0, (n_sections - 1) * review_every
            subset = None
            if n_sections >= 3:
                subset = (first + margin * review_every, last - margin * review_every)
                if subset[0] >= subset[1]:
                    subset = None
            specs.append(PhantomSpec(
                rows=rows,
                cols=cols,
                n_sections=n_sections,
                pixel_spacing=spacing,
                section_distance=5.0,
                cone_center=center,
                cone_radius=r_cone,
                ref_radius=r_ref,
                ref_center=ref_center,
                effusion=effusion,
                gap=gap,
                seed=seed,
                review_every=review_every,
                table_origin=round(float(rng.uniform(-400.0, -200.0)), 2),
                subset_range=subset,
                scan_id=f"{patient}-S{s + 1}",
                patient_id=patient,
            ))
    return specs


def write_phantom(spec: PhantomSpec, directory: Path) -> ManifestEntry:
    scan, prob, ref = generate(spec)
    prob_path = directory / f"{spec.scan_id}_prob.sgsw"
    ref_path = directory / f"{spec.scan_id}_ref.sgsw"
    write_probability(prob_path, prob)
    write_reference(ref_path, ref)
    return ManifestEntry(scan, prob_path.resolve(), ref_path.resolve())


def generate_cohort(
    out_dir: str | Path,
    n_patients: int,
    scans_per_patient: int | Sequence[int],
    bias: CohortBias = CohortBias(),
    seed: int = 0,
    rows: int = 512,
    cols: int = 512,
    n_sections: int = 50,
) -> Cohort:
    """Write a phantom cohort (rasters plus ``manifest.json``) under ``out_dir``."""
    out = Path(out_dir)
    raster_dir = out / "rasters"
    raster_dir.mkdir(parents=True, exist_ok=True)
    specs = cohort_specs(n_patients, scans_per_patient, bias, seed, rows, cols, n_sections)
    entries = tuple(write_phantom(s, raster_dir) for s in specs)
    manifest = DatasetManifest(entries)
    path = write_manifest(manifest, out / "manifest.json")
    return Cohort(path, manifest, tuple(specs))


def with_threshold_at(spec: PhantomSpec, t_star: float) -> PhantomSpec:
    """Copy of a concentric spec whose cone meets the reference radius at ``t_star``."""
    return replace(spec, cone_radius=spec.ref_radius / (1.0 - t_star))
