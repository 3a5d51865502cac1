"""Limited-view photoacoustic reconstruction: sparse time-of-flight operator,
classical solvers, a from-scratch CNN and the unrolled DAV iteration."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CompatibilityError,
    CoverageError,
    DivergenceError,
    FingerprintError,
    FormatError,
    MagicError,
    PactError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)
from .geometry import ImagingGeometry, coverage_check, desk_geometry, make_half_ring_geometry  # noqa: F401
