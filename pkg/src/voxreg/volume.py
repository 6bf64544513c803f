"""3-D scalar volumes with physical geometry, interpolation, and resolution pyramids.

A :class:`Volume` is an axis-aligned scalar grid. ``data`` is stored as a
``(nz, ny, nx)`` float64 array so that the flattened order is x-fastest,
matching the raw layout of MetaImage files. All physical quantities are in
millimeters; voxel ``(i, j, k)`` (x, y, z indices) has its center at
``origin + (i, j, k) * spacing``.

Interpolation is trilinear. Points outside the voxel-center bounding box
sample to NaN (the outside marker); NaN is a value, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DisjointExtentError, ValidationError

OUTSIDE = float("nan")
DEFAULT_BACKGROUND = -1024.0
_COVER_TOL = 1e-9


def _as_triple(v, name: str) -> tuple:
    arr = np.asarray(v, dtype=float).ravel()
    if arr.size != 3 or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be a finite length-3 vector, got {v!r}")
    return tuple(arr)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid: dims are (nx, ny, nz)."""

    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValidationError(f"grid dims must be 3 positive integers, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"grid spacing must be positive, got {self.spacing!r}")

    @property
    def shape(self) -> tuple:
        """Array shape (nz, ny, nx)."""
        return (self.dims[2], self.dims[1], self.dims[0])

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical voxel-center coordinates along one axis (0=x, 1=y, 2=z)."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def points(self) -> np.ndarray:
        """All voxel centers as an (n, 3) array in x-fastest order."""
        zz, yy, xx = np.meshgrid(
            self.axis_coords(2), self.axis_coords(1), self.axis_coords(0), indexing="ij"
        )
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def extent(self) -> tuple:
        """(lo, hi) physical voxel-center bounds, each a length-3 tuple."""
        lo = self.origin
        hi = tuple(self.origin[a] + self.spacing[a] * (self.dims[a] - 1) for a in range(3))
        return lo, hi

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        try:
            return cls(tuple(d["dims"]), tuple(d["spacing"]), tuple(d["origin"]))
        except KeyError as e:
            raise ValidationError(f"grid descriptor missing key {e}") from e


@dataclass(frozen=True)
class Volume:
    """Immutable 3-D scalar grid with physical placement.

    Parameters
    ----------
    data : ndarray, shape (nz, ny, nx)
        Scalar voxel values; converted to float64 and frozen.
    spacing : (sx, sy, sz)
        Voxel size in mm, all positive.
    origin : (ox, oy, oz)
        Physical position (mm) of the center of voxel (0, 0, 0).
    element_type : str
        Preferred MetaImage element type when written to disk.
    """

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    element_type: str = "MET_FLOAT"

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3:
            raise ValidationError(f"volume data must be 3-D, got shape {arr.shape}")
        if any(n < 2 for n in arr.shape):
            raise ValidationError(f"every volume dimension must be >= 2, got dims {self.dims_of(arr)}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"voxel spacing must be positive, got {self.spacing!r}")

    @staticmethod
    def dims_of(arr: np.ndarray) -> tuple:
        return (arr.shape[2], arr.shape[1], arr.shape[0])

    @property
    def dims(self) -> tuple:
        """(nx, ny, nz) voxel counts."""
        return (self.data.shape[2], self.data.shape[1], self.data.shape[0])

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def extent(self) -> tuple:
        return self.grid.extent()

    def physical_to_index(self, pts: np.ndarray) -> np.ndarray:
        """Map physical points (mm) to continuous index coordinates (x, y, z order)."""
        pts = np.asarray(pts, dtype=float)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_physical(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)


def _trilinear_index(data: np.ndarray, idx: np.ndarray, want_gradient: bool = False):
    """Trilinear interpolation at continuous index coordinates.

    ``idx`` has columns (x, y, z). A point is inside iff every coordinate
    lies in [0, dim-1] (tolerance 1e-9); the cell index is clamped so that
    a point exactly at the last voxel center interpolates within the last
    cell. Returns (values, inside) or (values, inside, gradient) where
    ``gradient`` is d(value)/d(index) with columns (x, y, z).
    """
    nz, ny, nx = data.shape
    x, y, z = idx[:, 0], idx[:, 1], idx[:, 2]
    tol = _COVER_TOL
    inside = (
        (x >= -tol) & (x <= nx - 1 + tol)
        & (y >= -tol) & (y <= ny - 1 + tol)
        & (z >= -tol) & (z <= nz - 1 + tol)
    )

    x0 = np.clip(np.floor(x).astype(np.int64), 0, nx - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, ny - 2)
    z0 = np.clip(np.floor(z).astype(np.int64), 0, nz - 2)
    fx = x - x0
    fy = y - y0
    fz = z - z0

    flat = data.ravel()
    base = (z0 * ny + y0) * nx + x0
    o = nx * ny
    c000 = flat[base]
    c100 = flat[base + 1]
    c010 = flat[base + nx]
    c110 = flat[base + nx + 1]
    c001 = flat[base + o]
    c101 = flat[base + o + 1]
    c011 = flat[base + o + nx]
    c111 = flat[base + o + nx + 1]

    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    # interpolate along x, then y, then z
    a00 = c000 * gx + c100 * fx
    a10 = c010 * gx + c110 * fx
    a01 = c001 * gx + c101 * fx
    a11 = c011 * gx + c111 * fx
    b0 = a00 * gy + a10 * fy
    b1 = a01 * gy + a11 * fy
    vals = b0 * gz + b1 * fz
    vals = np.where(inside, vals, OUTSIDE)

    if not want_gradient:
        return vals, inside

    d00 = c100 - c000
    d10 = c110 - c010
    d01 = c101 - c001
    d11 = c111 - c011
    ddx = (d00 * gy + d10 * fy) * gz + (d01 * gy + d11 * fy) * fz
    ddy = (a10 - a00) * gz + (a11 - a01) * fz
    ddz = b1 - b0
    grad = np.stack([ddx, ddy, ddz], axis=1)
    grad[~inside] = 0.0
    return vals, inside, grad


def trilinear_sample(v: Volume, p, want_gradient: bool = False):
    """Sample a volume at physical point(s) with trilinear interpolation.

    Parameters
    ----------
    v : Volume
    p : array_like, shape (3,) or (n, 3)
        Physical points in mm.
    want_gradient : bool
        Also return the spatial gradient of the interpolant (mm^-1 units).

    Returns
    -------
    values : float or ndarray
        Interpolated intensities; NaN marks points outside the grid.
    gradient : ndarray, optional
        Only when ``want_gradient``; d(value)/d(position), zero outside.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(1, 3) if single else p
    idx = v.physical_to_index(pts)
    if want_gradient:
        vals, _, grad = _trilinear_index(v.data, idx, want_gradient=True)
        grad = grad / np.asarray(v.spacing)
        if single:
            return float(vals[0]), grad[0]
        return vals, grad
    vals, _ = _trilinear_index(v.data, idx)
    return float(vals[0]) if single else vals


def _gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian taps at integer offsets, truncated at 3*sigma, sum 1."""
    radius = int(np.ceil(3.0 * sigma - 1e-9))
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _smooth(data: np.ndarray, sigmas) -> np.ndarray:
    """Separable Gaussian low-pass, renormalized at borders.

    The data and an all-ones volume are filtered with zero padding and the
    ratio taken, so constants are preserved exactly up to the boundary.
    """
    out = data
    norm = np.ones_like(data)
    for axis, sigma in zip((2, 1, 0), sigmas):  # array axes for (x, y, z)
        if sigma <= 0:
            continue
        k = _gaussian_kernel(sigma)
        out = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
        norm = ndimage.correlate1d(norm, k, axis=axis, mode="constant", cval=0.0)
    if out is data:
        return data.copy()
    return out / norm


def _sample_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of an array along one axis at fractional indices."""
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, data.shape[axis] - 2)
    f = coords - i0
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i0 + 1, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = f.size
    f = f.reshape(shape)
    return lo * (1.0 - f) + hi * f


def downsample(v: Volume, factor: int) -> Volume:
    """Low-pass filter and decimate a volume by an integer factor.

    The input is smoothed with a Gaussian of sigma = 0.5*factor voxels per
    axis (truncated at 3 sigma, border-renormalized) and then sampled at
    the centroid of each factor^3 source block, so output voxel centers
    sit at those centroids: origin shifts by (factor-1)/2 voxels and
    spacing scales by factor.
    """
    factor = int(factor)
    if factor < 1:
        raise ValidationError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return Volume(v.data, v.spacing, v.origin, v.element_type)
    new_dims = tuple(d // factor for d in v.dims)
    if any(d < 2 for d in new_dims):
        raise ValidationError(
            f"downsample by {factor} would shrink dims {v.dims} below 2 per axis"
        )
    sigma = 0.5 * factor
    smoothed = _smooth(v.data, (sigma, sigma, sigma))
    half = (factor - 1) / 2.0
    out = smoothed
    for axis, n in zip((2, 1, 0), new_dims):
        coords = np.arange(n) * factor + half
        out = _sample_axis(out, axis, coords)
    new_spacing = tuple(s * factor for s in v.spacing)
    new_origin = tuple(o + s * half for o, s in zip(v.origin, v.spacing))
    return Volume(out, new_spacing, new_origin, v.element_type)


def upsample(v: Volume, target_spacing) -> Volume:
    """Resample to a finer grid covering the same voxel-center extent.

    Values come from trilinear interpolation at the new voxel centers; the
    new grid shares the input origin and uses ``target_spacing`` exactly.
    """
    ts = _as_triple(target_spacing, "target_spacing")
    if any(t <= 0 for t in ts):
        raise ValidationError(f"target_spacing must be positive, got {ts}")
    if any(t > s * (1 + 1e-12) for t, s in zip(ts, v.spacing)):
        raise ValidationError(
            f"upsample requires target_spacing <= volume spacing per axis ({ts} vs {v.spacing})"
        )
    if ts == v.spacing:
        return Volume(v.data, v.spacing, v.origin, v.element_type)
    new_dims = tuple(
        int(np.floor((d - 1) * s / t + 1e-9)) + 1 for d, s, t in zip(v.dims, v.spacing, ts)
    )
    out = v.data
    for axis_arr, axis_pt, n in zip((2, 1, 0), (0, 1, 2), new_dims):
        coords = np.arange(n) * (ts[axis_pt] / v.spacing[axis_pt])
        out = _sample_axis(out, axis_arr, coords)
    return Volume(out, ts, v.origin, v.element_type)


def resample_to_spacing(v: Volume, target_spacing) -> Volume:
    """Regrid to an arbitrary spacing, smoothing first on coarsening axes.

    Axes where the target is coarser than the native spacing are low-pass
    filtered with sigma = 0.5 * ratio voxels before trilinear regridding.
    """
    ts = _as_triple(target_spacing, "target_spacing")
    if any(t <= 0 for t in ts):
        raise ValidationError(f"target_spacing must be positive, got {ts}")
    if ts == v.spacing:
        return Volume(v.data, v.spacing, v.origin, v.element_type)
    ratios = [t / s for t, s in zip(ts, v.spacing)]
    sigmas = tuple(0.5 * r if r > 1.0 + 1e-12 else 0.0 for r in ratios)
    data = _smooth(v.data, sigmas)
    new_dims = tuple(
        max(2, int(np.floor((d - 1) * s / t + 1e-9)) + 1) for d, s, t in zip(v.dims, v.spacing, ts)
    )
    out = data
    for axis_arr, axis_pt, n in zip((2, 1, 0), (0, 1, 2), new_dims):
        coords = np.arange(n) * ratios[axis_pt]
        out = _sample_axis(out, axis_arr, coords)
    return Volume(out, ts, v.origin, v.element_type)


def crop_to_extent(v: Volume, box_lo, box_hi, margin_voxels: int = 10) -> Volume:
    """Crop to the voxels whose centers lie inside a physical box.

    The kept index range is padded by ``margin_voxels`` per side, clamped
    to the volume bounds. Raises :class:`DisjointExtentError` when no
    voxel center falls inside the box.
    """
    lo = _as_triple(box_lo, "box_lo")
    hi = _as_triple(box_hi, "box_hi")
    if any(l > h for l, h in zip(lo, hi)):
        raise ValidationError(f"crop box is inverted: lo={lo}, hi={hi}")
    margin = int(margin_voxels)
    if margin < 0:
        raise ValidationError("margin_voxels must be >= 0")
    i_lo, i_hi = [], []
    for a in range(3):
        first = int(np.ceil((lo[a] - v.origin[a]) / v.spacing[a] - 1e-9))
        last = int(np.floor((hi[a] - v.origin[a]) / v.spacing[a] + 1e-9))
        if last < 0 or first > v.dims[a] - 1 or first > last:
            raise DisjointExtentError(
                f"crop box [{lo[a]}, {hi[a]}] misses the volume along axis {a}"
            )
        i_lo.append(max(0, first - margin))
        i_hi.append(min(v.dims[a] - 1, last + margin))
    sl = tuple(slice(i_lo[a], i_hi[a] + 1) for a in (2, 1, 0))
    new_origin = tuple(v.origin[a] + i_lo[a] * v.spacing[a] for a in range(3))
    return Volume(v.data[sl], v.spacing, new_origin, v.element_type)


def resample_with_transform(
    flo: Volume,
    affine,
    lattice,
    target,
    background: float = DEFAULT_BACKGROUND,
) -> Volume:
    """Warp a floating volume onto a target grid.

    Each target voxel center ``x`` samples the floating volume at
    ``affine(x) + displacement(lattice, x)``; samples falling outside the
    floating grid are filled with ``background``. ``lattice`` may be None
    for a purely affine warp; when present it must cover the target grid.
    """
    from .transform import bspline_displacement  # local import to avoid a cycle

    grid = target.grid if isinstance(target, Volume) else target
    pts = grid.points()
    warped = affine.apply(pts) if affine is not None else pts
    if lattice is not None:
        disp, inside = bspline_displacement(lattice, pts, with_inside=True)
        if not np.all(inside):
            raise ValidationError(
                "control lattice does not cover the target grid extent"
            )
        warped = warped + disp
    idx = flo.physical_to_index(warped)
    vals, inside = _trilinear_index(flo.data, idx)
    vals[~inside] = background
    return Volume(vals.reshape(grid.shape), grid.spacing, grid.origin, flo.element_type)


def checkerboard(a: Volume, b: Volume, block_voxels: int) -> Volume:
    """Alternate n-voxel blocks of two volumes on the same grid, the usual
    visual check of an alignment."""
    if a.dims != b.dims:
        raise ValidationError(f"checkerboard inputs differ in dims: {a.dims} vs {b.dims}")
    n = int(block_voxels)
    if n < 1:
        raise ValidationError("checkerboard block size must be >= 1 voxel")
    zz, yy, xx = np.indices(a.data.shape)
    take_a = ((xx // n) + (yy // n) + (zz // n)) % 2 == 0
    return Volume(np.where(take_a, a.data, b.data), a.spacing, a.origin, a.element_type)


@dataclass(frozen=True)
class PyramidLevel:
    """One resolution level: reference and floating resampled to a shared spacing."""

    level_index: int
    reference: Volume
    floating: Volume
    reference_mask: "object"
    floating_mask: "object"
    target_spacing: tuple


def _resample_mask_nn(mask, source_grid: GridSpec, target_grid: GridSpec):
    """Nearest-neighbor mask resampling onto a target grid, re-binarized."""
    from .mask import BinaryMask

    pts = target_grid.points()
    idx = np.rint(
        (pts - np.asarray(source_grid.origin)) / np.asarray(source_grid.spacing)
    ).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(source_grid.dims)), axis=1)
    out = np.zeros(target_grid.n_voxels, dtype=bool)
    sel = idx[ok]
    flat = mask.data.ravel()
    lin = (sel[:, 2] * source_grid.dims[1] + sel[:, 1]) * source_grid.dims[0] + sel[:, 0]
    out[ok] = flat[lin]
    return BinaryMask(out.reshape(target_grid.shape), target_grid.spacing, target_grid.origin)


def build_pyramid(reference: Volume, floating: Volume, ref_mask, float_mask, levels: int):
    """Build the coarse-to-fine resolution pyramid.

    Level ``levels-1`` (finest) uses the floating volume's native spacing;
    each coarser level doubles the spacing per axis. The floating volume is
    downsampled by exact powers of two; the reference is regridded to the
    identical target spacing at every level. Masks follow by
    nearest-neighbor resampling.

    Returns the list of :class:`PyramidLevel`, coarsest first.
    """
    levels = int(levels)
    if levels < 1:
        raise ValidationError(f"levels must be >= 1, got {levels}")
    if any(fs > rs * (1 + 1e-9) for fs, rs in zip(floating.spacing, reference.spacing)):
        raise ValidationError(
            "floating must be the finer modality: floating spacing "
            f"{floating.spacing} exceeds reference spacing {reference.spacing}"
        )
    coarse_factor = 2 ** (levels - 1)
    if any(d // coarse_factor < 8 for d in floating.dims):
        raise ValidationError(
            f"{levels} levels would drive floating dims {floating.dims} below 8"
        )

    out = []
    for level in range(levels):
        factor = 2 ** (levels - 1 - level)
        flo_level = downsample(floating, factor)
        ts = flo_level.spacing
        ref_level = resample_to_spacing(reference, ts)
        if any(d < 8 for d in ref_level.dims + flo_level.dims):
            raise ValidationError(
                f"level {level} dims fall below 8 (reference {ref_level.dims}, "
                f"floating {flo_level.dims})"
            )
        rmask = _resample_mask_nn(ref_mask, reference.grid, ref_level.grid)
        fmask = _resample_mask_nn(float_mask, floating.grid, flo_level.grid)
        out.append(
            PyramidLevel(
                level_index=level,
                reference=ref_level,
                floating=flo_level,
                reference_mask=rmask,
                floating_mask=fmask,
                target_spacing=ts,
            )
        )
    return out
