"""Evaluate probabilistic tumor segmentations across binarization thresholds."""

from segsweep.metrics import (
    BinaryMask,
    binarize,
    dsc,
    percent_volume_difference,
    scan_dsc,
    tumor_volume,
)
from segsweep.model import (
    DatasetManifest,
    ProbabilityRaster,
    ReferenceMask,
    ScanRecord,
    SectionGeometry,
    inter_section_distances,
    load_manifest,
    validate_scan,
    write_manifest,
)
from segsweep.sweep import (
    ThresholdGrid,
    aggregate,
    evaluate_scan,
    optimal_histogram,
    optimal_thresholds,
    run_sweep,
)

__version__ = "0.1.0"
