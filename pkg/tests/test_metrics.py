import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_rasters, make_scan
from segsweep.errors import GeometryError, UndefinedMetricError
from segsweep.metrics import (
    BinaryMask,
    binarize,
    dsc,
    percent_volume_difference,
    reference_mask,
    scan_dsc,
    tumor_volume,
)
from segsweep.model import ProbabilityRaster


def _prob(*grids):
    return ProbabilityRaster("s1", {i: np.asarray(g, dtype=np.float32) for i, g in enumerate(grids)})


def pixel_set(mask):
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(mask))}


def brute_force_dice(a, b):
    """Independent oracle: explicit pixel-coordinate sets."""
    sa, sb = pixel_set(a), pixel_set(b)
    if not sa and not sb:
        return None
    return 2 * len(sa & sb) / (len(sa) + len(sb))


# ---------------------------------------------------------------- binarize


def test_binarize_boundary_is_inclusive():
    m = binarize(_prob([[0.5, 0.49], [0.0, 1.0]]), 0.5)
    np.testing.assert_array_equal(m.grids[0], [[True, False], [False, True]])
    assert m.threshold_used == 0.5


def test_binarize_low_threshold_keeps_zero_out(rng):
    g = rng.random((8, 8)).astype(np.float32)
    g[0, :] = 0
    m = binarize(_prob(g), 0.001).grids[0]
    np.testing.assert_array_equal(m, g >= 0.001)
    assert not m[0].any()


def test_binarize_compares_in_float64():
    # float32(0.3) lies above 0.3 while the next float32 down lies below it
    below, at = np.nextafter(np.float32(0.3), np.float32(0)), np.float32(0.3)
    m = binarize(_prob([[below, at]]), 0.3).grids[0]
    assert m.tolist() == [[False, True]]
    # float32(0.7) lies below 0.7, so it must not pass a 0.7 threshold
    assert float(np.float32(0.7)) < 0.7
    assert binarize(_prob([[np.float32(0.7)]]), 0.7).grids[0].tolist() == [[False]]


@pytest.mark.parametrize("t", [0.0, -0.1, 1.01, float("nan")])
def test_binarize_rejects_bad_threshold(t):
    with pytest.raises(ValueError):
        binarize(_prob([[0.2]]), t)


@given(arrays(np.float32, (6, 6), elements=st.floats(0, 1, width=32)),
       st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_binarize_nested_masks(g, t1, t2):
    lo, hi = sorted((t1, t2))
    m_lo = binarize(_prob(g), lo).grids[0]
    m_hi = binarize(_prob(g), hi).grids[0]
    assert not (m_hi & ~m_lo).any()


# ---------------------------------------------------------------- volume


def test_volume_empty_mask():
    scan = make_scan([0, 5])
    mask = BinaryMask({0: np.zeros((4, 4), bool), 1: np.zeros((4, 4), bool)}, 0.5)
    v = tumor_volume(mask, scan)
    assert v.volume == 0.0 and v.per_section_pixel_counts == (0, 0)


def test_volume_single_section_hand_value():
    scan = make_scan([0], rows=10, cols=10, spacing=0.7617)
    mask = BinaryMask({0: np.ones((10, 10), bool)}, 0.5)
    v = tumor_volume(mask, scan, fallback_thickness=5.0)
    # 100 * 0.7617**2 * 5
    assert v.volume == pytest.approx(290.09, abs=0.01)


def test_volume_two_sections_hand_value():
    scan = make_scan([0, 5], rows=10, cols=10, spacing=1.0)
    a = np.zeros((10, 10), bool)
    a.flat[:40] = True
    b = np.zeros((10, 10), bool)
    b.flat[:60] = True
    v = tumor_volume(BinaryMask({0: a, 1: b}, 0.5), scan)
    assert v.volume == 500.0
    assert v.per_section_pixel_counts == (40, 60)


def test_volume_geometry_mismatch_names_section():
    scan = make_scan([0, 5], rows=4, cols=4)
    mask = BinaryMask({0: np.zeros((4, 4), bool), 1: np.zeros((3, 4), bool)}, 0.5)
    with pytest.raises(GeometryError, match="section 1"):
        tumor_volume(mask, scan)


@given(st.integers(0, 16), st.integers(0, 16))
def test_volume_additive_across_identical_sections(k, j):
    scan = make_scan([0, 5, 10], rows=4, cols=4, spacing=0.8)
    combined = np.zeros((4, 4), bool)
    combined.flat[:min(k + j, 16)] = True
    first = np.zeros((4, 4), bool)
    first.flat[:k] = True
    second = np.zeros((4, 4), bool)
    second.flat[:min(k + j, 16) - k] = True
    empty = np.zeros((4, 4), bool)
    together = tumor_volume(BinaryMask({0: combined, 1: empty, 2: empty}, 0.5), scan).volume
    split = tumor_volume(BinaryMask({0: first, 1: second, 2: empty}, 0.5), scan).volume
    assert split == pytest.approx(together, rel=1e-12)


# ---------------------------------------------------------------- dsc


def test_dsc_identity_and_disjoint():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0


def test_dsc_half_overlap():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 2:] = True
    b[1, :2] = True
    assert dsc(a, b) == 0.5


def test_dsc_both_empty_is_undefined():
    z = np.zeros((3, 3), bool)
    assert dsc(z, z) is None


def test_dsc_shape_mismatch():
    with pytest.raises(GeometryError):
        dsc(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


def test_dsc_matches_set_oracle_on_random_masks(rng):
    for _ in range(1000):
        a = rng.random((16, 16)) < rng.random()
        b = rng.random((16, 16)) < rng.random()
        assert dsc(a, b) == brute_force_dice(a, b)


@given(arrays(bool, (5, 5)), arrays(bool, (5, 5)))
def test_dsc_symmetric_and_bounded(a, b):
    assert dsc(a, b) == dsc(b, a)
    v = dsc(a, b)
    if v is not None:
        assert 0.0 <= v <= 1.0
    if a.any():
        assert dsc(a, a) == 1.0


# ---------------------------------------------------------------- scan dsc


def test_scan_dsc_excludes_both_empty_sections():
    full = np.ones((2, 2), bool)
    half = np.array([[1, 1], [0, 0]], bool)
    empty = np.zeros((2, 2), bool)
    pred = BinaryMask({0: full, 1: half, 2: empty}, 0.5)
    ref = BinaryMask({0: full, 1: np.array([[1, 0], [1, 0]], bool), 2: empty}, "reference")
    s = scan_dsc(pred, ref)
    assert s.per_section == (1.0, 0.5, None)
    assert s.mean == 0.75 and s.excluded == 1


def test_scan_dsc_identical():
    scan = make_scan([0, 5, 10])
    prob, ref = make_rasters(scan, [np.eye(4)] * 3, [np.eye(4)] * 3)
    assert scan_dsc(binarize(prob, 0.5), ref).mean == 1.0


def test_scan_dsc_empty_prediction():
    pred = BinaryMask({0: np.zeros((2, 2), bool)}, 0.5)
    ref = BinaryMask({0: np.ones((2, 2), bool)}, "reference")
    assert scan_dsc(pred, ref).mean == 0.0


def test_scan_dsc_nothing_comparable():
    z = BinaryMask({0: np.zeros((2, 2), bool), 1: np.zeros((2, 2), bool)}, 0.5)
    with pytest.raises(UndefinedMetricError, match="no comparable sections"):
        scan_dsc(z, z)


def test_reference_mask_label():
    scan = make_scan([0, 5])
    _, ref = make_rasters(scan, [np.eye(4)] * 2, [np.eye(4)] * 2)
    assert reference_mask(ref).threshold_used == "reference"


# ---------------------------------------------------------------- percent difference


def test_pct_diff_identity():
    assert percent_volume_difference(250.0, 250.0) == 0.0
    assert percent_volume_difference(250.0, 250.0, "mean") == 0.0


def test_pct_diff_undermeasurement_is_positive():
    assert percent_volume_difference(100, 66) == pytest.approx(34.0)


def test_pct_diff_overmeasurement_is_negative():
    assert percent_volume_difference(100, 120) == pytest.approx(-20.0)
    assert percent_volume_difference(100, 120, signed=False) == pytest.approx(20.0)


def test_pct_diff_mean_denominator():
    # 100 * (100 - 60) / 80
    assert percent_volume_difference(100, 60, "mean") == pytest.approx(50.0)


def test_pct_diff_zero_denominator_names_scan():
    with pytest.raises(UndefinedMetricError, match="scan P7"):
        percent_volume_difference(0.0, 10.0, scan_id="P7")
    with pytest.raises(UndefinedMetricError):
        percent_volume_difference(0.0, 0.0, "mean")


def test_pct_diff_unknown_convention():
    with pytest.raises(ValueError):
        percent_volume_difference(1, 1, "median")
