"""Exception hierarchy shared across the package.

Two failure families matter to callers: input/contract violations
(:class:`ValidationError`, CLI exit code 1) and runtime failures such as
non-convergence or degenerate data (:class:`ProcessingError`, CLI exit
code 2).
"""


class VoxregError(Exception):
    """Base class for all package errors."""


class ValidationError(VoxregError):
    """Invalid inputs: bad arguments, malformed files, broken invariants."""


class ProcessingError(VoxregError):
    """Runtime failures: segmentation, overlap, folding, convergence."""


class DisjointExtentError(ValidationError):
    """Crop box does not intersect the volume extent."""


class SegmentationError(ProcessingError):
    """Region extraction produced no acceptable component."""


class OverlapError(ProcessingError):
    """Too few contributing voxels to form a usable joint histogram."""


class FoldingError(ProcessingError):
    """Transform folds (non-positive Jacobian determinant) and could not be repaired."""


class DomainError(ValidationError):
    """Point lies outside a lattice's covered domain."""


class MisalignmentError(ProcessingError):
    """Transforms are too inconsistent for a meaningful composition measure."""


class DegenerateTestError(ProcessingError):
    """Statistical test is degenerate (e.g. all paired differences zero)."""


class MetaImageError(ValidationError):
    """Malformed MetaImage file."""


class UnsupportedElementTypeError(MetaImageError):
    """ElementType not in the supported set."""


class PayloadSizeError(MetaImageError):
    """Raw payload length does not match the header."""


class DimensionalityError(MetaImageError):
    """NDims is not 3."""
