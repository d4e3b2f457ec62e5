import numpy as np
import pytest

from segsweep.model import ProbabilityRaster, ReferenceMask, ScanRecord, SectionGeometry

ACCEPTANCE_LINES: list[str] = []


def make_scan(positions, rows=4, cols=4, spacing=1.0, reviewed=None, subset=None,
              scan_id="s1", patient_id="p1"):
    sections = tuple(
        SectionGeometry(i, float(z), spacing, rows, cols) for i, z in enumerate(positions)
    )
    if reviewed is None:
        reviewed = tuple(range(len(positions)))
    return ScanRecord(scan_id, patient_id, sections, tuple(reviewed), subset)


def make_rasters(scan, prob_grids, ref_grids):
    prob = ProbabilityRaster(scan.scan_id, {i: np.asarray(g, dtype=np.float32)
                                            for i, g in zip(scan.reviewed_indices, prob_grids)})
    ref = ReferenceMask(scan.scan_id, {i: np.asarray(g, dtype=bool)
                                       for i, g in zip(scan.reviewed_indices, ref_grids)})
    return prob, ref


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
