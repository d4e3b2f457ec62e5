import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_rasters, make_scan
from segsweep import raster
from segsweep.errors import GeometryError, ManifestError, ValidationError
from segsweep.model import (
    DatasetManifest,
    ManifestEntry,
    ProbabilityRaster,
    ReferenceMask,
    inter_section_distances,
    load_manifest,
    validate_scan,
    write_manifest,
    write_probability,
    write_reference,
)
from segsweep.phantom import CohortBias, generate_cohort


def _write_scan_files(tmp_path, scan, value=0.25):
    prob, ref = make_rasters(
        scan,
        [np.full((scan.sections[0].rows, scan.sections[0].cols), value)] * len(scan.reviewed_indices),
        [np.eye(scan.sections[0].rows, scan.sections[0].cols)] * len(scan.reviewed_indices),
    )
    pp, rp = tmp_path / f"{scan.scan_id}_p.sgsw", tmp_path / f"{scan.scan_id}_r.sgsw"
    write_probability(pp, prob)
    write_reference(rp, ref)
    return ManifestEntry(scan, pp.resolve(), rp.resolve())


# ---------------------------------------------------------------- raster codec


def test_raster_roundtrip(tmp_path, rng):
    grids = {3: rng.random((5, 7)).astype(np.float32), 9: rng.random((5, 7)).astype(np.float32)}
    raster.write_raster(tmp_path / "a.sgsw", "scanA", "f32", grids)
    header, back = raster.read_raster(tmp_path / "a.sgsw")
    assert header.scan_id == "scanA" and header.dtype == "f32"
    assert [s.index for s in header.sections] == [3, 9]
    for i in grids:
        np.testing.assert_array_equal(back[i], grids[i])
    assert not back[3].flags.writeable


def test_raster_layout_is_little_endian_with_magic(tmp_path):
    raster.write_raster(tmp_path / "m.sgsw", "x", "u8", {0: np.array([[1, 0]], dtype=np.uint8)})
    blob = (tmp_path / "m.sgsw").read_bytes()
    assert blob[:4] == b"SGSW" and blob[4] == 1
    hlen = int.from_bytes(blob[5:9], "little")
    header = json.loads(blob[9:9 + hlen])
    assert header == {"dtype": "u8", "scan_id": "x", "sections": [{"cols": 2, "index": 0, "rows": 1}]}
    assert blob[9 + hlen:] == b"\x01\x00"


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:-1],
])
def test_raster_rejects_corruption(tmp_path, mangle):
    p = tmp_path / "c.sgsw"
    raster.write_raster(p, "x", "f32", {0: np.zeros((2, 2), np.float32)})
    p.write_bytes(mangle(p.read_bytes()))
    with pytest.raises(raster.RasterFormatError):
        raster.read_header(p)


# ---------------------------------------------------------------- distances


def test_distances_uniform():
    scan = make_scan([0, 5, 10])
    assert inter_section_distances(scan) == [(0, 5.0), (1, 5.0), (2, 5.0)]


def test_distances_last_section_inherits_previous_gap():
    scan = make_scan([0, 5, 12])
    assert inter_section_distances(scan) == [(0, 5.0), (1, 7.0), (2, 7.0)]


def test_distances_single_section():
    scan = make_scan([0])
    with pytest.raises(GeometryError, match="cannot derive inter-section distance"):
        inter_section_distances(scan)
    assert inter_section_distances(scan, fallback_thickness=2.5) == [(0, 2.5)]


def test_distances_use_reviewed_sections_only():
    scan = make_scan([0, 2.5, 5, 7.5, 10], reviewed=(0, 2, 4))
    assert inter_section_distances(scan) == [(0, 5.0), (2, 5.0), (4, 5.0)]


def test_distances_descending_table_positions():
    scan = make_scan([100, 95, 88])
    assert inter_section_distances(scan) == [(0, 5.0), (1, 7.0), (2, 7.0)]


@given(st.lists(st.floats(0.1, 20, allow_nan=False), min_size=1, max_size=30))
def test_distances_cover_extent_plus_last_gap(steps):
    positions = np.concatenate([[0.0], np.cumsum(steps)])
    scan = make_scan(positions)
    d = inter_section_distances(scan)
    assert len(d) == len(positions)
    assert all(g > 0 for _, g in d)
    total = sum(g for _, g in d)
    assert total == pytest.approx(positions[-1] - positions[0] + (positions[-1] - positions[-2]))


# ---------------------------------------------------------------- validation


def test_validate_clean_scan():
    scan = make_scan([0, 5], rows=512, cols=512)
    prob, ref = make_rasters(scan, [np.full((512, 512), 0.5)] * 2, [np.zeros((512, 512))] * 2)
    assert validate_scan(scan, prob, ref) == []


def test_validate_out_of_range_probability():
    scan = make_scan([0, 5, 10])
    grids = [np.zeros((4, 4)) for _ in range(3)]
    grids[1][2, 3] = 1.2
    prob, ref = make_rasters(scan, grids, [np.zeros((4, 4))] * 3)
    report = validate_scan(scan, prob, ref)
    assert len(report) == 1
    v = report[0]
    assert v.kind == "probability-range" and v.section == 1
    assert "row=2" in v.message and "col=3" in v.message


def test_validate_dimension_mismatch():
    scan = make_scan([0, 5], rows=512, cols=512)
    prob = ProbabilityRaster("s1", {0: np.zeros((512, 512), np.float32),
                                    1: np.zeros((512, 512), np.float32)})
    ref = ReferenceMask("s1", {0: np.zeros((256, 256), bool), 1: np.zeros((512, 512), bool)})
    report = validate_scan(scan, prob, ref)
    assert [(v.kind, v.section) for v in report] == [("dimensions", 0)]


def test_validate_flags_non_monotone_positions_and_is_pure():
    scan = make_scan([0, 5, 5, 10])
    prob, ref = make_rasters(scan, [np.zeros((4, 4))] * 4, [np.zeros((4, 4))] * 4)
    first = validate_scan(scan, prob, ref)
    assert any(v.kind == "table-position" for v in first)
    assert validate_scan(scan, prob, ref) == first


def test_validate_nan_is_out_of_range():
    scan = make_scan([0, 5])
    g = np.zeros((4, 4))
    g[0, 0] = np.nan
    prob, ref = make_rasters(scan, [g, np.zeros((4, 4))], [np.zeros((4, 4))] * 2)
    assert [v.kind for v in validate_scan(scan, prob, ref)] == ["probability-range"]


# ---------------------------------------------------------------- manifest


def test_manifest_single_scan(tmp_path):
    scan = make_scan([0, 5, 10])
    entry = _write_scan_files(tmp_path, scan)
    path = write_manifest(DatasetManifest((entry,)), tmp_path / "m.json")
    m = load_manifest(path)
    assert len(m) == 1
    assert m.entries[0] == entry


def test_manifest_missing_raster_names_path(tmp_path):
    scan = make_scan([0, 5, 10])
    entry = _write_scan_files(tmp_path, scan)
    entry.prob_path.unlink()
    path = write_manifest(DatasetManifest((entry,)), tmp_path / "m.json")
    with pytest.raises(ManifestError, match=str(entry.prob_path.name)):
        load_manifest(path)


def test_manifest_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "scans": [\n  {"scan_id": "a",,}\n ]\n}\n')
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(p)


def test_manifest_field_error_has_context(tmp_path):
    scan = make_scan([0, 5])
    entry = _write_scan_files(tmp_path, scan)
    path = write_manifest(DatasetManifest((entry,)), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["scans"][0]["sections"][1]["rows"] = "four"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match=r"scans\[0\]\.sections\[1\]\.rows"):
        load_manifest(path)


def test_manifest_geometry_mismatch_names_scan_and_section(tmp_path):
    scan = make_scan([0, 5])
    entry = _write_scan_files(tmp_path, scan)
    path = write_manifest(DatasetManifest((entry,)), tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["scans"][0]["sections"][1]["cols"] = 8
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="scan s1, section 1"):
        load_manifest(path)


def test_manifest_duplicate_scan_ids(tmp_path):
    a = _write_scan_files(tmp_path, make_scan([0, 5]))
    path = write_manifest(DatasetManifest((a, a)), tmp_path / "m.json")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_manifest_cohort_shape(tmp_path):
    counts = [4] * 17 + [5] * 4
    assert sum(counts) == 88
    cohort = generate_cohort(tmp_path, 21, counts, CohortBias(0.5625), seed=3,
                             rows=64, cols=64, n_sections=2)
    m = load_manifest(cohort.manifest_path)
    assert len(m) == 88
    assert len(m.by_patient()) == 21


def test_manifest_subset_range_roundtrip(tmp_path):
    scan = make_scan([0, 5, 10, 15], subset=(1, 2))
    entry = _write_scan_files(tmp_path, scan)
    path = write_manifest(DatasetManifest((entry,)), tmp_path / "m.json")
    assert json.loads(path.read_text())["scans"][0]["subset_range"] == {"superior": 1, "inferior": 2}
    assert load_manifest(path).entries[0].scan.subset_range == (1, 2)


@settings(max_examples=25, deadline=None)
@given(
    positions=st.lists(st.integers(-500, 500), min_size=2, max_size=6, unique=True),
    spacing=st.floats(0.3, 2.0),
    patient=st.text("abcXYZ019-", min_size=1, max_size=8),
    data=st.data(),
)
def test_manifest_write_load_roundtrip(tmp_path_factory, positions, spacing, patient, data):
    tmp = tmp_path_factory.mktemp("rt")
    positions = sorted(float(p) / 4 for p in positions)
    n = len(positions)
    reviewed = data.draw(st.lists(st.sampled_from(range(n)), min_size=1, unique=True).map(sorted))
    subset = None
    if n >= 2 and data.draw(st.booleans()):
        subset = (0, n - 1)
    scan = make_scan(positions, rows=3, cols=2, spacing=spacing, reviewed=reviewed,
                     subset=subset, patient_id=patient)
    entry = _write_scan_files(tmp, scan)
    original = DatasetManifest((entry,))
    loaded = load_manifest(write_manifest(original, tmp / "m.json"))
    assert loaded == original
