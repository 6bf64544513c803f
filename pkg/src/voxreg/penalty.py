"""Deformation regularizers: bending energy, volume preservation, inverse
consistency, and folding repair.

All three penalties act on the displacement field over a Cartesian sample
grid (by convention the voxel centers of the current resolution level
restricted to the mask's bounding box). Bending energy and volume
preservation are per-sample means; inverse consistency is the plain sum of
squared round-trip residuals over both domains.

Bending energy is quadratic in the lattice coefficients, so it is computed
through per-axis Gram matrices of the basis derivative weights: an exact
algebraic rewrite of the sample sum that costs a few small matrix
contractions instead of a pass over every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import FoldingError, MisalignmentError
from .transform import ControlLattice, GridBspline, Transform
from .volume import GridSpec

# (derivative orders along x, y, z; multiplier) for the bending integrand:
# the three pure second derivatives plus the doubled mixed terms
_BENDING_TERMS = (
    ((2, 0, 0), 1.0),
    ((0, 2, 0), 1.0),
    ((0, 0, 2), 1.0),
    ((1, 1, 0), 2.0),
    ((0, 1, 1), 2.0),
    ((1, 0, 1), 2.0),
)


@dataclass(frozen=True)
class PenaltyReport:
    """Penalty values at one evaluation, for logs and traces."""

    bending: float
    volpres: float
    inconsistency: float
    sample_count: int


class BendingOperator:
    """Precomputed Gram form of the bending energy for one lattice geometry
    and sample grid: value = phi' Q phi / N和 gradient = 2 Q phi / N."""

    def __init__(self, lattice: ControlLattice, domain: GridSpec):
        gb = GridBspline(lattice, domain)
        self.n = domain.n_voxels
        self.grams = []
        self._path = None
        for orders, mult in _BENDING_TERMS:
            gs = []
            for axis in range(3):
                w = gb.weight_matrix(axis, orders[axis])
                gs.append(w.T @ w)
            self.grams.append((gs, mult))

    def value_and_gradient(self, coeffs: np.ndarray):
        value = 0.0
        grad = np.zeros_like(coeffs)
        for (gx, gy, gz), mult in self.grams:
            if self._path is None:
                self._path = np.einsum_path(
                    "abcD,aw,bv,cu->wvuD", coeffs, gz, gy, gx, optimize="optimal"
                )[0]
            k = np.einsum("abcD,aw,bv,cu->wvuD", coeffs, gz, gy, gx, optimize=self._path)
            value += mult * float(np.vdot(coeffs, k))
            grad += (2.0 * mult) * k
        return value / self.n, grad / self.n


def bending_energy(l: ControlLattice, domain: GridSpec):
    """Mean squared second derivatives of the displacement field (mixed
    terms doubled) over the sample grid, with the analytic gradient.

    Exactly zero for any lattice whose coefficients are an affine function
    of control-point index.
    """
    op = BendingOperator(l, domain)
    return op.value_and_gradient(l.coefficients)


def _det3(j: np.ndarray) -> np.ndarray:
    """Determinants of an (n, 3, 3) stack, expanded along the first row."""
    a, b, c = j[:, 0, 0], j[:, 0, 1], j[:, 0, 2]
    d, e, f = j[:, 1, 0], j[:, 1, 1], j[:, 1, 2]
    g, h, i = j[:, 2, 0], j[:, 2, 1], j[:, 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def _cof3(j: np.ndarray) -> np.ndarray:
    """Cofactor matrices of an (n, 3, 3) stack (so det * J^-T = cof)."""
    a, b, c = j[:, 0, 0], j[:, 0, 1], j[:, 0, 2]
    d, e, f = j[:, 1, 0], j[:, 1, 1], j[:, 1, 2]
    g, h, i = j[:, 2, 0], j[:, 2, 1], j[:, 2, 2]
    cof = np.empty_like(j)
    cof[:, 0, 0] = e * i - f * h
    cof[:, 0, 1] = -(d * i - f * g)
    cof[:, 0, 2] = d * h - e * g
    cof[:, 1, 0] = -(b * i - c * h)
    cof[:, 1, 1] = a * i - c * g
    cof[:, 1, 2] = -(a * h - b * g)
    cof[:, 2, 0] = b * f - c * e
    cof[:, 2, 1] = -(a * f - c * d)
    cof[:, 2, 2] = a * e - b * d
    return cof


def _grid_jacobians(gb: GridBspline, coeffs: np.ndarray) -> np.ndarray:
    """Full-map Jacobians I + d(disp)/dx at every grid point, (n, 3, 3)."""
    n = gb.grid.n_voxels
    jac = np.empty((n, 3, 3))
    for b in range(3):
        orders = tuple(1 if a == b else 0 for a in range(3))
        jac[:, :, b] = gb.field(coeffs, orders).reshape(n, 3)
    jac += np.eye(3)
    return jac


def sampled_determinants(l: ControlLattice, domain: GridSpec) -> np.ndarray:
    """Jacobian determinants of x -> x + displacement(x) at the grid points."""
    gb = GridBspline(l, domain)
    return _det3(_grid_jacobians(gb, l.coefficients))


def volume_preservation(l: ControlLattice, domain: GridSpec):
    """Mean squared log Jacobian determinant with its analytic gradient.

    Raises :class:`FoldingError` when any sampled determinant is
    non-positive; run :func:`correct_folding` first.
    """
    return volume_preservation_gb(GridBspline(l, domain), l.coefficients)


def volume_preservation_gb(gb: GridBspline, coeffs: np.ndarray):
    """Volume-preservation penalty through a prebuilt grid evaluator."""
    jac = _grid_jacobians(gb, coeffs)
    det = _det3(jac)
    if det.min() <= 0.0:
        raise FoldingError(
            f"non-positive Jacobian determinant (min {det.min():.3e}) in the sample "
            "grid; apply folding correction before the volume-preservation penalty"
        )
    n = len(det)
    log_det = np.log(det)
    value = float((log_det**2).mean())
    cof = _cof3(jac)
    coef = (2.0 / n) * (log_det / det)
    grad = np.zeros_like(coeffs)
    shape = gb.grid.shape + (3,)
    for b in range(3):
        orders = tuple(1 if a == b else 0 for a in range(3))
        vb = (coef[:, None] * cof[:, :, b]).reshape(shape)
        grad += gb.adjoint(vb, orders)
    return value, grad


@dataclass(frozen=True)
class InverseConsistencyResult:
    value: float
    grad_forward: np.ndarray | None
    grad_backward: np.ndarray | None
    n_samples: int
    n_skipped: int


def _scatter_points(lattice: ControlLattice, pts: np.ndarray, values: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(lattice.coefficients)
    _kernels.scatter_at_points(
        np.asarray(lattice.coefficients.shape[:3]),
        np.asarray(lattice.origin),
        np.asarray(lattice.spacing),
        np.ascontiguousarray(pts),
        np.ascontiguousarray(values),
        grad,
    )
    return grad


def _disp_jac_points(lattice: ControlLattice | None, pts: np.ndarray):
    """(disp, ddisp/dx, inside) of the lattice part at scattered points."""
    n = len(pts)
    if lattice is None:
        return np.zeros((n, 3)), np.zeros((n, 3, 3)), np.ones(n, dtype=bool)
    disp = np.empty((n, 3))
    jac = np.empty((n, 3, 3))
    inside = np.empty(n, dtype=np.bool_)
    _kernels.disp_jac_at_points(
        lattice.coefficients,
        np.asarray(lattice.origin),
        np.asarray(lattice.spacing),
        np.ascontiguousarray(pts),
        disp,
        jac,
        inside,
    )
    return disp, jac, inside


def _disp_points(lattice: ControlLattice | None, pts: np.ndarray):
    n = len(pts)
    if lattice is None:
        return np.zeros((n, 3)), np.ones(n, dtype=bool)
    disp = np.empty((n, 3))
    inside = np.empty(n, dtype=np.bool_)
    _kernels.disp_at_points(
        lattice.coefficients,
        np.asarray(lattice.origin),
        np.asarray(lattice.spacing),
        np.ascontiguousarray(pts),
        disp,
        inside,
    )
    return disp, inside


def _consistency_term(
    outer: Transform,
    inner: Transform,
    domain: GridSpec,
    inner_gb: GridBspline | None,
    want_gradient: bool,
):
    """One direction: sum over grid x of |outer(inner(x)) - x|^2.

    Returns (value, grad_outer_lattice, grad_inner_lattice, n_valid, n_total).
    ``inner_gb`` is the separable evaluator of the inner lattice on the
    domain grid (None when the inner transform has no lattice).
    """
    pts = domain.points()
    n = len(pts)
    mid = inner.affine.apply(pts) if inner.affine is not None else pts
    if inner.lattice is not None:
        mid = mid + inner_gb.displacement(inner.lattice.coefficients).reshape(n, 3)

    if want_gradient:
        disp_o, djac_o, inside = _disp_jac_points(outer.lattice, mid)
    else:
        disp_o, inside = _disp_points(outer.lattice, mid)
    out = outer.affine.apply(mid) if outer.affine is not None else mid
    out = out + disp_o
    res = out - pts
    res[~inside] = 0.0
    n_valid = int(inside.sum())
    value = float((res**2).sum())
    if not want_gradient:
        return value, None, None, n_valid, n

    grad_outer = None
    if outer.lattice is not None:
        grad_outer = _scatter_points(outer.lattice, mid[inside], 2.0 * res[inside])

    grad_inner = None
    if inner.lattice is not None:
        jac_outer = djac_o + (outer.affine.matrix if outer.affine is not None else np.eye(3))
        chain = 2.0 * np.einsum("nij,ni->nj", jac_outer, res)
        chain[~inside] = 0.0
        grad_inner = inner_gb.adjoint(chain.reshape(domain.shape + (3,)))
    return value, grad_outer, grad_inner, n_valid, n


def inverse_consistency(
    forward: Transform,
    backward: Transform,
    ref_domain: GridSpec,
    float_domain: GridSpec | None = None,
    fwd_gb: GridBspline | None = None,
    bwd_gb: GridBspline | None = None,
    want_gradient: bool = True,
) -> InverseConsistencyResult:
    """Summed squared round-trip residuals of both compositions.

    Over the reference domain the residual is backward(forward(x)) - x;
    over the floating domain (defaults to the reference domain) it is
    forward(backward(y)) - y. Round trips leaving a lattice's covered
    domain are skipped; more than 50% skipped raises
    :class:`MisalignmentError`. Gradients are returned for whichever
    transforms carry lattices. ``fwd_gb``/``bwd_gb`` let repeated callers
    reuse the grid evaluators of the two lattices.
    """
    if float_domain is None:
        float_domain = ref_domain
    if fwd_gb is None and forward.lattice is not None:
        fwd_gb = GridBspline(forward.lattice, ref_domain)
    if bwd_gb is None and backward.lattice is not None:
        bwd_gb = GridBspline(backward.lattice, float_domain)

    v1, g_bwd_1, g_fwd_1, valid1, n1 = _consistency_term(
        backward, forward, ref_domain, fwd_gb, want_gradient
    )
    v2, g_fwd_2, g_bwd_2, valid2, n2 = _consistency_term(
        forward, backward, float_domain, bwd_gb, want_gradient
    )

    n_total = n1 + n2
    n_valid = valid1 + valid2
    if n_valid < 0.5 * n_total:
        raise MisalignmentError(
            f"{n_total - n_valid} of {n_total} round trips leave the lattice domain; "
            "transforms are too misaligned for the inverse-consistency penalty"
        )

    def _sum(a, b):
        if a is None and b is None:
            return None
        if a is None:
            return b
        if b is None:
            return a
        return a + b

    return InverseConsistencyResult(
        value=v1 + v2,
        grad_forward=_sum(g_fwd_1, g_fwd_2),
        grad_backward=_sum(g_bwd_1, g_bwd_2),
        n_samples=n_valid,
        n_skipped=n_total - n_valid,
    )


@dataclass(frozen=True)
class FoldingReport:
    iterations: int
    corrected_samples: int
    min_det_before: float
    min_det_after: float


def correct_folding(
    l: ControlLattice,
    domain: GridSpec,
    eps: float = 1e-6,
    target: float = 1e-2,
    max_iters: int = 50,
    gb: GridBspline | None = None,
) -> tuple:
    """Repair folded regions until all sampled determinants are positive.

    While any sampled determinant is <= ``eps``, the supporting control
    points of the offending samples are moved along the gradient of the
    determinant, with the step backtracked so the worst determinant
    increases and the count of non-positive determinants never grows. A
    firing repair pushes the worst determinant up to ``target`` to leave a
    safety margin between samples. Lattices that never fire are returned
    unchanged.

    Returns (lattice, :class:`FoldingReport`); raises
    :class:`FoldingError` after ``max_iters`` unsuccessful iterations.
    """
    if gb is None:
        gb = GridBspline(l, domain)
    coeffs = l.coefficients
    det = _det3(_grid_jacobians(gb, coeffs))
    min_before = float(det.min())
    if min_before > eps:
        return l, FoldingReport(0, 0, min_before, min_before)

    corrected = int((det <= eps).sum())
    shape = gb.grid.shape + (3,)
    min_step = 1e-12
    for iteration in range(1, max_iters + 1):
        worst = float(det.min())
        if worst >= target:
            return l.with_coefficients(coeffs), FoldingReport(
                iteration - 1, corrected, min_before, worst
            )
        jac = _grid_jacobians(gb, coeffs)
        cof = _cof3(jac)
        sel = (det <= target).astype(float)
        direction = np.zeros_like(coeffs)
        for b in range(3):
            orders = tuple(1 if a == b else 0 for a in range(3))
            vb = (sel[:, None] * cof[:, :, b]).reshape(shape)
            direction += gb.adjoint(vb, orders)
        dmax = np.abs(direction).max()
        if dmax <= 0.0:
            raise FoldingError("folding repair stalled: determinant gradient vanished")
        step = 0.1 * min(l.spacing) / dmax
        n_nonpos = int((det <= 0).sum())
        improved = False
        while step > min_step:
            trial = coeffs + step * direction
            trial_det = _det3(_grid_jacobians(gb, trial))
            if float(trial_det.min()) > worst and int((trial_det <= 0).sum()) <= n_nonpos:
                coeffs = trial
                det = trial_det
                improved = True
                break
            step *= 0.5
        if not improved:
            break

    if float(det.min()) > eps:
        return l.with_coefficients(coeffs), FoldingReport(
            max_iters, corrected, min_before, float(det.min())
        )
    bad_idx = np.flatnonzero(det <= eps)[:5]
    locs = domain.points()[bad_idx].tolist()
    raise FoldingError(
        f"folding repair failed after {max_iters} iterations; "
        f"min determinant {det.min():.3e} at sample points {locs}"
    )
