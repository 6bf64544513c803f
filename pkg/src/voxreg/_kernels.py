"""Numba inner loops for B-spline evaluation at scattered points.

Grid-aligned evaluation goes through the separable matrix path in
:mod:`voxreg.transform`; these kernels cover arbitrary point sets
(transform composition, resampling diagnostics, folding repair).

Conventions shared with the rest of the package: lattice coefficients are
``(gz, gy, gx, 3)``; a point with lattice coordinate ``u = (x - origin) /
spacing`` is covered iff ``1 <= u <= G - 2`` per axis (tolerance 1e-9);
the base index is ``clip(floor(u), 1, G - 3)`` and the 4x4x4 support uses
the uniform cubic B-spline basis.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numba
import numpy as np

_TOL = 1e-9


@numba.njit(inline="always")
def _weights(f, w):
    w[0] = (1.0 - f) ** 3 / 6.0
    w[1] = (3.0 * f**3 - 6.0 * f**2 + 4.0) / 6.0
    w[2] = (-3.0 * f**3 + 3.0 * f**2 + 3.0 * f + 1.0) / 6.0
    w[3] = f**3 / 6.0


@numba.njit(inline="always")
def _dweights(f, w):
    w[0] = -((1.0 - f) ** 2) / 2.0
    w[1] = (3.0 * f**2 - 4.0 * f) / 2.0
    w[2] = (-3.0 * f**2 + 2.0 * f + 1.0) / 2.0
    w[3] = f**2 / 2.0


@numba.njit(inline="always")
def _locate(x, origin, spacing, grid_n):
    """Return (base_index, fraction, covered) along one axis."""
    u = (x - origin) / spacing
    covered = (u >= 1.0 - _TOL) and (u <= grid_n - 2.0 + _TOL)
    i0 = int(np.floor(u))
    if i0 < 1:
        i0 = 1
    elif i0 > grid_n - 3:
        i0 = grid_n - 3
    return i0, u - i0, covered


@numba.njit(parallel=True, cache=True)
def disp_at_points(coeffs, origin, spacing, pts, out_disp, out_inside):
    n = pts.shape[0]
    gz, gy, gx = coeffs.shape[0], coeffs.shape[1], coeffs.shape[2]
    for p in numba.prange(n):
        ix, fx, okx = _locate(pts[p, 0], origin[0], spacing[0], gx)
        iy, fy, oky = _locate(pts[p, 1], origin[1], spacing[1], gy)
        iz, fz, okz = _locate(pts[p, 2], origin[2], spacing[2], gz)
        if not (okx and oky and okz):
            out_inside[p] = False
            out_disp[p, 0] = 0.0
            out_disp[p, 1] = 0.0
            out_disp[p, 2] = 0.0
            continue
        out_inside[p] = True
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        _weights(fx, wx)
        _weights(fy, wy)
        _weights(fz, wz)
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for c in range(4):
            wc = wz[c]
            for b in range(4):
                wcb = wc * wy[b]
                for a in range(4):
                    w = wcb * wx[a]
                    a0 += w * coeffs[iz - 1 + c, iy - 1 + b, ix - 1 + a, 0]
                    a1 += w * coeffs[iz - 1 + c, iy - 1 + b, ix - 1 + a, 1]
                    a2 += w * coeffs[iz - 1 + c, iy - 1 + b, ix - 1 + a, 2]
        out_disp[p, 0] = a0
        out_disp[p, 1] = a1
        out_disp[p, 2] = a2


@numba.njit(parallel=True, cache=True)
def disp_jac_at_points(coeffs, origin, spacing, pts, out_disp, out_jac, out_inside):
    """Displacement and its spatial derivative d(disp)/dx (without identity)."""
    n = pts.shape[0]
    gz, gy, gx = coeffs.shape[0], coeffs.shape[1], coeffs.shape[2]
    for p in numba.prange(n):
        ix, fx, okx = _locate(pts[p, 0], origin[0], spacing[0], gx)
        iy, fy, oky = _locate(pts[p, 1], origin[1], spacing[1], gy)
        iz, fz, okz = _locate(pts[p, 2], origin[2], spacing[2], gz)
        if not (okx and oky and okz):
            out_inside[p] = False
            for i in range(3):
                out_disp[p, i] = 0.0
                for j in range(3):
                    out_jac[p, i, j] = 0.0
            continue
        out_inside[p] = True
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        dx = np.empty(4)
        dy = np.empty(4)
        dz = np.empty(4)
        _weights(fx, wx)
        _weights(fy, wy)
        _weights(fz, wz)
        _dweights(fx, dx)
        _dweights(fy, dy)
        _dweights(fz, dz)
        for i in range(3):
            out_disp[p, i] = 0.0
            for j in range(3):
                out_jac[p, i, j] = 0.0
        for c in range(4):
            for b in range(4):
                for a in range(4):
                    w000 = wz[c] * wy[b] * wx[a]
                    w100 = wz[c] * wy[b] * dx[a] / spacing[0]
                    w010 = wz[c] * dy[b] * wx[a] / spacing[1]
                    w001 = dz[c] * wy[b] * wx[a] / spacing[2]
                    for i in range(3):
                        phi = coeffs[iz - 1 + c, iy - 1 + b, ix - 1 + a, i]
                        out_disp[p, i] += w000 * phi
                        out_jac[p, i, 0] += w100 * phi
                        out_jac[p, i, 1] += w010 * phi
                        out_jac[p, i, 2] += w001 * phi


@numba.njit(cache=True)
def scatter_at_points(grid_shape, origin, spacing, pts, values, out_grad):
    """Adjoint of displacement evaluation: accumulate per-point vectors
    into the supporting control points. Points outside the covered domain
    are skipped. Serial on purpose (scatter races under prange)."""
    n = pts.shape[0]
    gz, gy, gx = grid_shape[0], grid_shape[1], grid_shape[2]
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for p in range(n):
        ix, fx, okx = _locate(pts[p, 0], origin[0], spacing[0], gx)
        iy, fy, oky = _locate(pts[p, 1], origin[1], spacing[1], gy)
        iz, fz, okz = _locate(pts[p, 2], origin[2], spacing[2], gz)
        if not (okx and oky and okz):
            continue
        _weights(fx, wx)
        _weights(fy, wy)
        _weights(fz, wz)
        v0 = values[p, 0]
        v1 = values[p, 1]
        v2 = values[p, 2]
        for c in range(4):
            wc = wz[c]
            for b in range(4):
                wcb = wc * wy[b]
                for a in range(4):
                    w = wcb * wx[a]
                    out_grad[iz - 1 + c, iy - 1 + b, ix - 1 + a, 0] += w * v0
                    out_grad[iz - 1 + c, iy - 1 + b, ix - 1 + a, 1] += w * v1
                    out_grad[iz - 1 + c, iy - 1 + b, ix - 1 + a, 2] += w * v2
