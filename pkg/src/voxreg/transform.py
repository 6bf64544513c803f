"""Affine initialization and the cubic B-spline free-form deformation model.

The deformation is parameterized as a displacement lattice: a uniform grid
of 3-vector coefficients, blended by the uniform cubic B-spline basis
(support of 4 control points per axis). The displacement at physical
point ``x`` with lattice coordinate ``u = (x - origin) / spacing`` is the
64-term tensor-product sum over the 4x4x4 supporting control points. A
point is covered iff ``1 <= u <= G - 2`` per axis.

A full transform maps ``x -> affine(x) + displacement(x)``; the affine is
held separate so penalties can act on the displacement field alone.

Two evaluation paths exist and agree to rounding: numba kernels for
arbitrary point sets (:mod:`voxreg._kernels`) and a separable
matrix path (:class:`GridBspline`) when the sample points form a
Cartesian grid, which reduces each field to three small matrix
contractions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DomainError, ValidationError
from .volume import GridSpec

_COVER_TOL = 1e-9


# ---------------------------------------------------------------------------
# affine


@dataclass(frozen=True)
class AffineTransform:
    """Affine map p -> matrix @ p + translation, in physical millimeters."""

    matrix: np.ndarray
    translation: np.ndarray
    mode: str = "affine"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise ValidationError("affine transform has non-finite entries")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValidationError("affine matrix is singular (|det| <= 1e-12)")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.matrix @ p + self.translation
        return p @ self.matrix.T + self.translation

    def inverse(self) -> "AffineTransform":
        m_inv = np.linalg.inv(self.matrix)
        return AffineTransform(m_inv, -m_inv @ self.translation, self.mode)

    def to_list(self) -> list:
        """Row-major 12 numbers: 3x3 matrix rows then translation."""
        return [*self.matrix.ravel().tolist(), *self.translation.tolist()]

    @classmethod
    def from_list(cls, vals) -> "AffineTransform":
        vals = np.asarray(vals, dtype=float).ravel()
        if vals.size != 12:
            raise ValidationError(f"affine serialization needs 12 numbers, got {vals.size}")
        return cls(vals[:9].reshape(3, 3), vals[9:])


def apply_affine(a: AffineTransform, p) -> np.ndarray:
    """Apply an affine transform to one point or an (n, 3) batch."""
    return a.apply(p)


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered correspondences (source point, target point), both in mm."""

    sources: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sources, dtype=float).reshape(-1, 3)
        d = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if s.shape != d.shape:
            raise ValidationError("landmark sources and targets differ in count")
        if len(s) < 3:
            raise ValidationError(f"need at least 3 landmark pairs, got {len(s)}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(d))):
            raise ValidationError("landmarks contain non-finite coordinates")
        diff = s[:, None, :] - s[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < 1e-9:
            raise ValidationError("duplicate source landmarks")
        s.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "targets", d)

    def __len__(self) -> int:
        return len(self.sources)


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    """Closed-form least-squares similarity fit (rotation, isotropic scale,
    translation) via the SVD of the centered covariance."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    if np.linalg.matrix_rank(sc) < 2:
        raise ValidationError(
            "landmark sources are collinear; similarity fit is underdetermined"
        )
    cov = dc.T @ sc / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.array([1.0, 1.0, d])
    rot = u @ np.diag(flip) @ vt
    var_s = (sc**2).sum() / len(src)
    scale = (s * flip).sum() / var_s
    mat = scale * rot
    return AffineTransform(mat, mu_d - mat @ mu_s, mode="similarity")


def fit_affine_landmarks(lm: LandmarkSet) -> AffineTransform:
    """Least-squares affine fit of target = A @ source + t.

    With four or more non-coplanar pairs the full 12-parameter affine is
    solved; with exactly three pairs, or coplanar sources, the fit degrades
    to a similarity transform (reported through the ``mode`` flag).
    """
    src, dst = lm.sources, lm.targets
    design = np.hstack([src, np.ones((len(src), 1))])
    if len(src) >= 4 and np.linalg.matrix_rank(design) == 4:
        sol, *_ = np.linalg.lstsq(design, dst, rcond=None)
        return AffineTransform(sol[:3].T, sol[3], mode="affine")
    return _fit_similarity(src, dst)


# ---------------------------------------------------------------------------
# B-spline basis (vectorized; the numba kernels carry their own copies)


def bspline_weights(f: np.ndarray) -> np.ndarray:
    """Basis weights of the 4 supporting control points for fraction f in [0, 1]."""
    f = np.asarray(f, dtype=float)
    return np.stack(
        [
            (1.0 - f) ** 3 / 6.0,
            (3.0 * f**3 - 6.0 * f**2 + 4.0) / 6.0,
            (-3.0 * f**3 + 3.0 * f**2 + 3.0 * f + 1.0) / 6.0,
            f**3 / 6.0,
        ],
        axis=-1,
    )


def bspline_dweights(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.stack(
        [
            -((1.0 - f) ** 2) / 2.0,
            (3.0 * f**2 - 4.0 * f) / 2.0,
            (-3.0 * f**2 + 2.0 * f + 1.0) / 2.0,
            f**2 / 2.0,
        ],
        axis=-1,
    )


def bspline_ddweights(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return np.stack([1.0 - f, 3.0 * f - 2.0, 1.0 - 3.0 * f, f], axis=-1)


_WEIGHT_FNS = (bspline_weights, bspline_dweights, bspline_ddweights)


# ---------------------------------------------------------------------------
# control lattice


@dataclass(frozen=True)
class ControlLattice:
    """Uniform grid of 3-vector B-spline coefficients.

    ``coefficients`` has shape (gz, gy, gx, 3) so the flattened per-point
    order is x-fastest; ``origin`` is the physical position of control
    point (0, 0, 0) and ``spacing`` the control-point pitch in mm.
    """

    coefficients: np.ndarray
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.coefficients, dtype=np.float64))
        if c.ndim != 4 or c.shape[3] != 3:
            raise ValidationError(
                f"lattice coefficients must have shape (gz, gy, gx, 3), got {c.shape}"
            )
        if any(n < 4 for n in c.shape[:3]):
            raise ValidationError(
                f"need at least 4 control points per axis, got grid {self.grid_dims_of(c)}"
            )
        if not np.all(np.isfinite(c)):
            raise ValidationError("lattice coefficients contain non-finite values")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValidationError(f"lattice spacing must be 3 positive reals, got {self.spacing!r}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @staticmethod
    def grid_dims_of(c: np.ndarray) -> tuple:
        return (c.shape[2], c.shape[1], c.shape[0])

    @property
    def grid_dims(self) -> tuple:
        """(gx, gy, gz) control points per axis."""
        return (self.coefficients.shape[2], self.coefficients.shape[1], self.coefficients.shape[0])

    def covered_extent(self) -> tuple:
        """(lo, hi) of the physical domain where evaluation is defined."""
        lo = tuple(self.origin[a] + self.spacing[a] for a in range(3))
        hi = tuple(
            self.origin[a] + self.spacing[a] * (self.grid_dims[a] - 2) for a in range(3)
        )
        return lo, hi

    def covers(self, lo, hi) -> bool:
        clo, chi = self.covered_extent()
        return all(
            clo[a] <= lo[a] + _COVER_TOL and hi[a] - _COVER_TOL <= chi[a] for a in range(3)
        )

    def with_coefficients(self, coeffs: np.ndarray) -> "ControlLattice":
        return ControlLattice(coeffs, self.spacing, self.origin)

    def zero_like(self) -> "ControlLattice":
        return self.with_coefficients(np.zeros_like(self.coefficients))

    @property
    def n_points(self) -> int:
        return self.coefficients.shape[0] * self.coefficients.shape[1] * self.coefficients.shape[2]


def lattice_covering(lo, hi, spacing, margin_cp: int = 0) -> ControlLattice:
    """Zero lattice whose covered domain contains the physical box [lo, hi].

    ``margin_cp`` extra control points are added per side beyond the
    minimum cubic-support margin.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    sp = np.asarray(spacing, dtype=float)
    if np.any(sp <= 0):
        raise ValidationError(f"lattice spacing must be positive, got {spacing!r}")
    if np.any(hi < lo):
        raise ValidationError("lattice_covering box is inverted")
    margin = int(margin_cp)
    origin = lo - (1 + margin) * sp
    dims = np.ceil((hi - origin) / sp + 2 + margin).astype(int) + 1
    dims = np.maximum(dims, 4)
    lat = ControlLattice(
        np.zeros((dims[2], dims[1], dims[0], 3)), tuple(sp), tuple(origin)
    )
    assert lat.covers(tuple(lo), tuple(hi))
    return lat


def _as_points(x) -> tuple:
    p = np.asarray(x, dtype=float)
    single = p.ndim == 1
    return (p.reshape(1, 3) if single else np.ascontiguousarray(p)), single


def bspline_displacement(l: ControlLattice, x, with_inside: bool = False):
    """Displacement of the deformation field at physical point(s).

    Raises :class:`DomainError` for points outside the lattice's covered
    domain unless ``with_inside`` is set, in which case an inside flag
    array is returned alongside (outside rows are zero).
    """
    pts, single = _as_points(x)
    disp = np.empty_like(pts)
    inside = np.empty(len(pts), dtype=np.bool_)
    _kernels.disp_at_points(
        l.coefficients, np.asarray(l.origin), np.asarray(l.spacing), pts, disp, inside
    )
    if with_inside:
        return (disp[0], bool(inside[0])) if single else (disp, inside)
    if not inside.all():
        bad = pts[~inside][0]
        raise DomainError(
            f"point {bad.tolist()} lies outside the lattice's covered domain "
            f"{l.covered_extent()}; extend the lattice"
        )
    return disp[0] if single else disp


def bspline_jacobian(l: ControlLattice, x, with_inside: bool = False):
    """Jacobian of the full map x -> x + displacement(x) at point(s) x.

    Returns identity + d(displacement)/dx so the determinant measures the
    local volume change of the deformation.
    """
    pts, single = _as_points(x)
    disp = np.empty_like(pts)
    jac = np.empty((len(pts), 3, 3))
    inside = np.empty(len(pts), dtype=np.bool_)
    _kernels.disp_jac_at_points(
        l.coefficients, np.asarray(l.origin), np.asarray(l.spacing), pts, disp, jac, inside
    )
    jac += np.eye(3)
    if with_inside:
        return (jac[0], bool(inside[0])) if single else (jac, inside)
    if not inside.all():
        bad = pts[~inside][0]
        raise DomainError(
            f"point {bad.tolist()} lies outside the lattice's covered domain "
            f"{l.covered_extent()}; extend the lattice"
        )
    return jac[0] if single else jac


def _refine_axis(c: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(c, axis, 0)
    g = a.shape[0]
    out = np.empty((2 * g - 3,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = (a[: g - 1] + a[1:g]) / 2.0
    out[1::2] = (a[: g - 2] + 6.0 * a[1 : g - 1] + a[2:g]) / 8.0
    return np.moveaxis(out, 0, axis)


def refine_lattice(l: ControlLattice) -> ControlLattice:
    """Halve the control-point spacing by dyadic B-spline subdivision.

    The represented displacement field is preserved exactly on the covered
    domain, which is unchanged: the refined grid has 2G-3 points per axis
    and its origin shifts inward by half the old spacing.
    """
    c = l.coefficients
    for axis in (0, 1, 2):
        c = _refine_axis(c, axis)
    spacing = tuple(s / 2.0 for s in l.spacing)
    origin = tuple(o + s / 2.0 for o, s in zip(l.origin, l.spacing))
    return ControlLattice(c, spacing, origin)


# ---------------------------------------------------------------------------
# full transform and composition


@dataclass(frozen=True)
class Transform:
    """Full map x -> affine(x) + displacement(x); either part optional."""

    affine: AffineTransform | None = None
    lattice: ControlLattice | None = None

    def apply(self, pts) -> tuple:
        """Map points; returns (mapped, inside) where ``inside`` flags
        lattice-domain coverage (all True without a lattice)."""
        pts, single = _as_points(pts)
        out = self.affine.apply(pts) if self.affine is not None else pts.copy()
        if self.lattice is None:
            inside = np.ones(len(pts), dtype=bool)
        else:
            disp, inside = bspline_displacement(self.lattice, pts, with_inside=True)
            out = out + disp
        return (out[0], bool(inside[0])) if single else (out, inside)

    def jacobian(self, pts) -> tuple:
        """Spatial Jacobian of the full map at points; (jac, inside)."""
        pts, single = _as_points(pts)
        base = self.affine.matrix if self.affine is not None else np.eye(3)
        if self.lattice is None:
            jac = np.broadcast_to(base, (len(pts), 3, 3)).copy()
            inside = np.ones(len(pts), dtype=bool)
        else:
            disp = np.empty_like(pts)
            jac = np.empty((len(pts), 3, 3))
            inside = np.empty(len(pts), dtype=np.bool_)
            _kernels.disp_jac_at_points(
                self.lattice.coefficients,
                np.asarray(self.lattice.origin),
                np.asarray(self.lattice.spacing),
                pts,
                disp,
                jac,
                inside,
            )
            jac += base
        return (jac[0], bool(inside[0])) if single else (jac, inside)


def compose_residual(forward: Transform, backward: Transform, x) -> tuple:
    """Round-trip residual forward(backward(x)) - x.

    Returns (residuals, valid); residuals whose intermediate or final
    evaluation left a lattice's covered domain are flagged invalid (and
    zeroed) rather than raising, so penalty sums can skip them.
    """
    pts, single = _as_points(x)
    mid, ok1 = backward.apply(pts)
    out, ok2 = forward.apply(mid)
    valid = ok1 & ok2
    res = out - pts
    res[~valid] = 0.0
    return (res[0], bool(valid[0])) if single else (res, valid)


# ---------------------------------------------------------------------------
# separable evaluation on Cartesian grids


class GridBspline:
    """Precomputed per-axis basis matrices tying one lattice geometry to one
    sample grid, so fields and adjoints reduce to small tensor contractions.

    The grid must lie inside the lattice's covered domain. Matrices are
    cached per derivative order; physical-space derivative factors (1 /
    spacing^order) are folded in.
    """

    def __init__(self, lattice: ControlLattice, grid: GridSpec):
        self.grid = grid
        self.lattice_spacing = lattice.spacing
        self.lattice_origin = lattice.origin
        self.grid_dims = lattice.grid_dims
        self._w: dict = {}
        self._field_path = None
        self._adjoint_path = None
        self._locate = []
        for axis in range(3):
            coords = grid.axis_coords(axis)
            g = lattice.grid_dims[axis]
            u = (coords - lattice.origin[axis]) / lattice.spacing[axis]
            if u.min() < 1.0 - _COVER_TOL or u.max() > g - 2.0 + _COVER_TOL:
                raise DomainError(
                    f"sample grid leaves the lattice's covered domain along axis {axis} "
                    f"(u range [{u.min():.3f}, {u.max():.3f}], valid [1, {g - 2}])"
                )
            i0 = np.clip(np.floor(u).astype(np.int64), 1, g - 3)
            self._locate.append((i0, u - i0))

    def weight_matrix(self, axis: int, order: int) -> np.ndarray:
        """Dense (n_axis, g_axis) basis matrix for one derivative order."""
        key = (axis, order)
        if key not in self._w:
            i0, f = self._locate[axis]
            g = self.grid_dims[axis]
            w = _WEIGHT_FNS[order](f) / self.lattice_spacing[axis] ** order
            mat = np.zeros((len(f), g))
            cols = i0[:, None] + np.arange(-1, 3)[None, :]
            mat[np.arange(len(f))[:, None], cols] = w
            self._w[key] = mat
        return self._w[key]

    def field(self, coeffs: np.ndarray, orders=(0, 0, 0)) -> np.ndarray:
        """Evaluate the (mixed-derivative) displacement field on the grid.

        ``orders`` gives the derivative order along (x, y, z). Result shape
        is (nz, ny, nx, 3).
        """
        wx = self.weight_matrix(0, orders[0])
        wy = self.weight_matrix(1, orders[1])
        wz = self.weight_matrix(2, orders[2])
        if self._field_path is None:
            self._field_path = np.einsum_path(
                "abcD,za,yb,xc->zyxD", coeffs, wz, wy, wx, optimize="optimal"
            )[0]
        return np.einsum("abcD,za,yb,xc->zyxD", coeffs, wz, wy, wx, optimize=self._field_path)

    def adjoint(self, values: np.ndarray, orders=(0, 0, 0)) -> np.ndarray:
        """Transpose of :meth:`field`: scatter per-voxel vectors back to the
        control points. ``values`` is (nz, ny, nx, 3); result (gz, gy, gx, 3)."""
        wx = self.weight_matrix(0, orders[0])
        wy = self.weight_matrix(1, orders[1])
        wz = self.weight_matrix(2, orders[2])
        if self._adjoint_path is None:
            self._adjoint_path = np.einsum_path(
                "zyxD,za,yb,xc->abcD", values, wz, wy, wx, optimize="optimal"
            )[0]
        return np.einsum("zyxD,za,yb,xc->abcD", values, wz, wy, wx, optimize=self._adjoint_path)

    def displacement(self, coeffs: np.ndarray) -> np.ndarray:
        return self.field(coeffs)

    def jacobian_disp(self, coeffs: np.ndarray) -> np.ndarray:
        """d(displacement)/dx on the grid, shape (nz, ny, nx, 3, 3);
        last axes are (component, derivative direction)."""
        parts = [
            self.field(coeffs, orders=tuple(1 if a == d else 0 for a in range(3)))
            for d in range(3)
        ]
        return np.stack(parts, axis=-1)
