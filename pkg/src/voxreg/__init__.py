"""Volumetric image registration: landmark-initialized affine alignment,
multi-level cubic B-spline free-form deformation driven by masked
normalized mutual information with smoothness, volume-preservation, and
inverse-consistency penalties, and surface-distance evaluation."""

__version__ = "0.1.0"

from .errors import (
    DegenerateTestError,
    DisjointExtentError,
    DomainError,
    FoldingError,
    MetaImageError,
    MisalignmentError,
    OverlapError,
    ProcessingError,
    SegmentationError,
    ValidationError,
    VoxregError,
)
from .mask import BinaryMask, LungMaskParams, largest_component, lung_mask, morphology, threshold
from .transform import (
    AffineTransform,
    ControlLattice,
    LandmarkSet,
    Transform,
    apply_affine,
    bspline_displacement,
    bspline_jacobian,
    compose_residual,
    fit_affine_landmarks,
    lattice_covering,
    refine_lattice,
)
from .evaluation import (
    DistanceStats,
    EvaluationReport,
    SurfacePointSet,
    avg_min_distance,
    evaluate_registration,
    evaluate_registration_points,
    extract_surface,
    render_table,
    wilcoxon_signed_rank,
)
from .optimizer import (
    ObjectiveConfig,
    RegistrationResult,
    TraceRow,
    combine_objective,
    objective,
    optimize_level,
    register,
)
from .penalty import (
    PenaltyReport,
    bending_energy,
    correct_folding,
    inverse_consistency,
    sampled_determinants,
    volume_preservation,
)
from .similarity import (
    IntensityWindow,
    JointHistogram,
    NmiWorkspace,
    joint_histogram,
    nmi,
    nmi_gradient,
)
from .volume import (
    GridSpec,
    PyramidLevel,
    Volume,
    build_pyramid,
    checkerboard,
    crop_to_extent,
    downsample,
    resample_to_spacing,
    resample_with_transform,
    trilinear_sample,
    upsample,
)

__all__ = [name for name in dir() if not name.startswith("_")]
