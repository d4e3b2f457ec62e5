class SegSweepError(ValueError):
    """Base class for all library errors."""


class ManifestError(SegSweepError):
    """Manifest could not be parsed or references missing files."""


class ValidationError(SegSweepError):
    """Inputs parsed but violate a geometric or value invariant."""


class GeometryError(SegSweepError):
    """Mask/raster dimensions or section sets do not line up with a scan."""


class UndefinedMetricError(SegSweepError):
    """A figure of merit has no defined value (e.g. zero denominator)."""


class ConfigurationError(SegSweepError):
    """Run options are inconsistent with the data (e.g. subset without range)."""


class DegenerateSampleError(SegSweepError):
    """A statistical test cannot be computed on the given sample."""
