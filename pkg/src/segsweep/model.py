"""Scan geometry, dataset manifests and input validation."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from segsweep import raster
from segsweep.errors import GeometryError, ManifestError, ValidationError


@dataclass(frozen=True)
class SectionGeometry:
    index: int
    table_position: float  # mm
    pixel_spacing: float  # mm, square pixels
    rows: int
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class ScanRecord:
    """One CT scan: acquired sections plus the subset a reader reviewed.

    ``subset_range`` is ``(superior_index, inferior_index)``, inclusive, and
    marks the anatomic subset used by region-restricted evaluation.
    """

    scan_id: str
    patient_id: str
    sections: tuple[SectionGeometry, ...]
    reviewed_indices: tuple[int, ...]
    subset_range: tuple[int, int] | None = None

    @cached_property
    def _by_index(self) -> dict[int, SectionGeometry]:
        return {s.index: s for s in self.sections}

    def section(self, index: int) -> SectionGeometry:
        try:
            return self._by_index[index]
        except KeyError:
            raise GeometryError(f"scan {self.scan_id}: no section with index {index}") from None

    def reviewed_sections(self) -> list[SectionGeometry]:
        return [self.section(i) for i in self.reviewed_indices]


@dataclass(frozen=True, eq=False)
class ProbabilityRaster:
    scan_id: str
    grids: Mapping[int, np.ndarray]  # section index -> float32 rows x cols


@dataclass(frozen=True, eq=False)
class ReferenceMask:
    scan_id: str
    grids: Mapping[int, np.ndarray]  # section index -> bool rows x cols


@dataclass(frozen=True)
class ManifestEntry:
    scan: ScanRecord
    prob_path: Path
    ref_path: Path

    def load_probability(self) -> ProbabilityRaster:
        return load_probability(self.prob_path, self.scan)

    def load_reference(self) -> ReferenceMask:
        return load_reference(self.ref_path, self.scan)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def scan_ids(self) -> list[str]:
        return [e.scan.scan_id for e in self.entries]

    def by_patient(self) -> dict[str, list[ManifestEntry]]:
        groups: dict[str, list[ManifestEntry]] = defaultdict(list)
        for e in self.entries:
            groups[e.scan.patient_id].append(e)
        return dict(groups)


@dataclass(frozen=True)
class Violation:
    scan_id: str
    section: int | None
    kind: str
    message: str

    def __str__(self) -> str:
        where = f"scan {self.scan_id}"
        if self.section is not None:
            where += f", section {self.section}"
        return f"{where}: [{self.kind}] {self.message}"


# --------------------------------------------------------------------------
# geometry


def geometry_violations(scan: ScanRecord) -> list[Violation]:
    """Invariant violations of the scan record alone (no pixel data)."""
    out: list[Violation] = []

    def add(section, kind, msg):
        out.append(Violation(scan.scan_id, section, kind, msg))

    seen: set[int] = set()
    for s in scan.sections:
        if s.index in seen:
            add(s.index, "duplicate-index", "section index appears more than once")
        seen.add(s.index)
        if not s.pixel_spacing > 0:
            add(s.index, "pixel-spacing", f"pixel spacing must be > 0, got {s.pixel_spacing}")
        if s.rows <= 0 or s.cols <= 0:
            add(s.index, "dimensions", f"rows/cols must be > 0, got {s.rows}x{s.cols}")

    positions = np.array([s.table_position for s in scan.sections], dtype=float)
    if len(positions) >= 2:
        steps = np.diff(positions)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            bad = int(np.flatnonzero((steps <= 0) if steps[0] > 0 else (steps >= 0))[0]) + 1
            add(scan.sections[bad].index, "table-position",
                "table positions are not strictly monotonic in section order")

    if not scan.reviewed_indices:
        add(None, "reviewed", "no reviewed sections")
    if len(set(scan.reviewed_indices)) != len(scan.reviewed_indices):
        add(None, "reviewed", "reviewed indices contain duplicates")
    for i in scan.reviewed_indices:
        if i not in seen:
            add(i, "reviewed", "reviewed index is not a section of the scan")
    order = [scan.sections.index(scan._by_index[i]) for i in scan.reviewed_indices if i in seen]
    if order != sorted(order):
        add(None, "reviewed", "reviewed indices are not in section order")

    if scan.subset_range is not None:
        sup, inf = scan.subset_range
        if not sup < inf:
            add(None, "subset-range", f"superior index {sup} must be < inferior index {inf}")
        for i in (sup, inf):
            if i not in seen:
                add(i, "subset-range", "subset bound is not a section of the scan")
    return out


def inter_section_distances(
    scan: ScanRecord, fallback_thickness: float | None = None
) -> list[tuple[int, float]]:
    """Through-plane extent (mm) owned by each reviewed section.

    Each reviewed section owns the gap to the next reviewed section; the last
    one inherits the preceding gap.  A scan with a single reviewed section
    needs ``fallback_thickness``.
    """
    reviewed = scan.reviewed_sections()
    if not reviewed:
        raise GeometryError(f"scan {scan.scan_id}: no reviewed sections")
    if len(reviewed) == 1:
        if fallback_thickness is None:
            raise GeometryError(
                f"scan {scan.scan_id}: cannot derive inter-section distance "
                "from a single reviewed section"
            )
        if not fallback_thickness > 0:
            raise GeometryError(f"fallback thickness must be > 0, got {fallback_thickness}")
        return [(reviewed[0].index, float(fallback_thickness))]

    gaps = [abs(b.table_position - a.table_position) for a, b in zip(reviewed, reviewed[1:])]
    if min(gaps) <= 0:
        raise GeometryError(f"scan {scan.scan_id}: repeated table position among reviewed sections")
    gaps.append(gaps[-1])
    return [(s.index, g) for s, g in zip(reviewed, gaps)]


# --------------------------------------------------------------------------
# pixel-level validation


def validate_scan(
    scan: ScanRecord, prob: ProbabilityRaster, ref: ReferenceMask
) -> list[Violation]:
    """Every invariant violation for one scan; an empty list means valid."""
    out = geometry_violations(scan)
    geom = {s.index: s for s in scan.sections}

    def add(section, kind, msg):
        out.append(Violation(scan.scan_id, section, kind, msg))

    for label, data in (("probability", prob), ("reference", ref)):
        if data.scan_id != scan.scan_id:
            add(None, "scan-id", f"{label} raster belongs to scan {data.scan_id!r}")
        missing = [i for i in scan.reviewed_indices if i not in data.grids]
        extra = [i for i in data.grids if i not in scan.reviewed_indices]
        for i in missing:
            add(i, "missing-section", f"{label} raster has no grid for this reviewed section")
        for i in extra:
            add(i, "extra-section", f"{label} raster has a grid for an unreviewed section")

    for i in scan.reviewed_indices:
        g = geom.get(i)
        if g is None:
            continue
        p = prob.grids.get(i)
        if p is not None:
            if p.shape != g.shape:
                add(i, "dimensions",
                    f"probability grid {p.shape[0]}x{p.shape[1]} vs geometry {g.rows}x{g.cols}")
            bad = ~((p >= 0) & (p <= 1))  # NaN counts as out of range
            if bad.any():
                r, c = np.argwhere(bad)[0]
                add(i, "probability-range",
                    f"{int(bad.sum())} value(s) outside [0, 1]; first at "
                    f"(row={r}, col={c}) = {float(p[r, c])!r}")
        m = ref.grids.get(i)
        if m is not None:
            if m.shape != g.shape:
                add(i, "dimensions",
                    f"reference grid {m.shape[0]}x{m.shape[1]} vs geometry {g.rows}x{g.cols}")
            if m.dtype != np.bool_:
                add(i, "mask-dtype", f"reference grid has dtype {m.dtype}, expected bool")
    return out


# --------------------------------------------------------------------------
# rasters


def _check_header(header: raster.RasterHeader, scan: ScanRecord, dtype: str, path: Path) -> None:
    if header.scan_id != scan.scan_id:
        raise ValidationError(
            f"scan {scan.scan_id}: raster {path} is labelled scan {header.scan_id!r}"
        )
    if header.dtype != dtype:
        raise ValidationError(
            f"scan {scan.scan_id}: raster {path} has dtype {header.dtype}, expected {dtype}"
        )
    indices = [s.index for s in header.sections]
    if indices != list(scan.reviewed_indices):
        raise ValidationError(
            f"scan {scan.scan_id}: raster {path} sections {indices} do not match "
            f"reviewed indices {list(scan.reviewed_indices)}"
        )
    for s in header.sections:
        g = scan.section(s.index)
        if (s.rows, s.cols) != g.shape:
            raise ValidationError(
                f"scan {scan.scan_id}, section {s.index}: raster {path} is "
                f"{s.rows}x{s.cols} but geometry says {g.rows}x{g.cols}"
            )


def load_probability(path: str | Path, scan: ScanRecord) -> ProbabilityRaster:
    path = Path(path)
    header, grids = raster.read_raster(path)
    _check_header(header, scan, "f32", path)
    return ProbabilityRaster(scan.scan_id, grids)


def load_reference(path: str | Path, scan: ScanRecord) -> ReferenceMask:
    path = Path(path)
    header, grids = raster.read_raster(path)
    _check_header(header, scan, "u8", path)
    out = {}
    for i, g in grids.items():
        if g.max(initial=0) > 1:
            raise ValidationError(
                f"scan {scan.scan_id}, section {i}: reference mask holds values other than 0/1"
            )
        b = g.astype(bool)
        b.flags.writeable = False
        out[i] = b
    return ReferenceMask(scan.scan_id, out)


def write_probability(path: str | Path, prob: ProbabilityRaster) -> None:
    raster.write_raster(path, prob.scan_id, "f32", prob.grids)


def write_reference(path: str | Path, ref: ReferenceMask) -> None:
    raster.write_raster(path, ref.scan_id, "u8", ref.grids)


# --------------------------------------------------------------------------
# manifest


class _Fields:
    """Typed accessors over a JSON object that report the field path on error."""

    def __init__(self, obj: Any, where: str):
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: expected an object")
        self.obj = obj
        self.where = where

    def _get(self, key: str) -> Any:
        if key not in self.obj:
            raise ManifestError(f"{self.where}.{key}: missing required field")
        return self.obj[key]

    def str(self, key: str) -> str:
        v = self._get(key)
        if not isinstance(v, str) or not v:
            raise ManifestError(f"{self.where}.{key}: expected a non-empty string, got {v!r}")
        return v

    def int(self, key: str) -> int:
        v = self._get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ManifestError(f"{self.where}.{key}: expected an integer, got {v!r}")
        return v

    def float(self, key: str) -> float:
        v = self._get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ManifestError(f"{self.where}.{key}: expected a number, got {v!r}")
        return float(v)

    def list(self, key: str) -> list:
        v = self._get(key)
        if not isinstance(v, list):
            raise ManifestError(f"{self.where}.{key}: expected an array")
        return v


def _parse_scan(obj: Any, where: str, base: Path) -> ManifestEntry:
    f = _Fields(obj, where)
    sections = []
    for k, s in enumerate(f.list("sections")):
        sf = _Fields(s, f"{where}.sections[{k}]")
        sections.append(SectionGeometry(
            index=sf.int("index"),
            table_position=sf.float("table_position_mm"),
            pixel_spacing=sf.float("pixel_spacing_mm"),
            rows=sf.int("rows"),
            cols=sf.int("cols"),
        ))
    reviewed = []
    for k, v in enumerate(f.list("reviewed_indices")):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ManifestError(f"{where}.reviewed_indices[{k}]: expected an integer, got {v!r}")
        reviewed.append(v)
    subset = None
    if obj.get("subset_range") is not None:
        rf = _Fields(obj["subset_range"], f"{where}.subset_range")
        subset = (rf.int("superior"), rf.int("inferior"))
    scan = ScanRecord(
        scan_id=f.str("scan_id"),
        patient_id=f.str("patient_id"),
        sections=tuple(sections),
        reviewed_indices=tuple(reviewed),
        subset_range=subset,
    )
    return ManifestEntry(scan, (base / f.str("prob_path")).resolve(),
                         (base / f.str("ref_path")).resolve())


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest, including the raster headers it names.

    Pixel values are not read here; use :func:`validate_scan` for that.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    top = _Fields(doc, "manifest")
    base = path.parent
    entries = [_parse_scan(s, f"scans[{k}]", base) for k, s in enumerate(top.list("scans"))]

    ids = [e.scan.scan_id for e in entries]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ManifestError(f"{path}: duplicate scan_id values {dupes}")

    for e in entries:
        problems = geometry_violations(e.scan)
        if problems:
            raise ValidationError("; ".join(str(p) for p in problems))
        for p, dtype in ((e.prob_path, "f32"), (e.ref_path, "u8")):
            if not p.is_file():
                raise ManifestError(f"scan {e.scan.scan_id}: raster file not found: {p}")
            try:
                header = raster.read_header(p)
            except raster.RasterFormatError as exc:
                raise ValidationError(f"scan {e.scan.scan_id}: {exc}") from exc
            _check_header(header, e.scan, dtype, p)
    return DatasetManifest(tuple(entries))


def _relpath(p: Path, base: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:  # different drive on Windows
        return str(p)


def manifest_to_dict(manifest: DatasetManifest | Iterable[ManifestEntry], base: Path) -> dict:
    scans = []
    for e in manifest:
        s = e.scan
        item: dict[str, Any] = {
            "scan_id": s.scan_id,
            "patient_id": s.patient_id,
            "sections": [
                {"index": g.index, "table_position_mm": g.table_position,
                 "pixel_spacing_mm": g.pixel_spacing, "rows": g.rows, "cols": g.cols}
                for g in s.sections
            ],
            "reviewed_indices": list(s.reviewed_indices),
        }
        if s.subset_range is not None:
            item["subset_range"] = {"superior": s.subset_range[0], "inferior": s.subset_range[1]}
        item["prob_path"] = _relpath(Path(e.prob_path), base)
        item["ref_path"] = _relpath(Path(e.ref_path), base)
        scans.append(item)
    return {"scans": scans}


def write_manifest(manifest: DatasetManifest | Iterable[ManifestEntry], path: str | Path) -> Path:
    """Write ``manifest`` as JSON; raster paths are stored relative to it."""
    path = Path(path)
    doc = manifest_to_dict(manifest, path.resolve().parent)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path
