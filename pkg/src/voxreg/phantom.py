"""Synthetic ground-truth pairs for end-to-end validation.

Two presets:

* ``sphere``: a textured volume with a spherical specimen whose surface is
  contracted radially by a known number of voxels. Before alignment every
  specimen surface point sits exactly that distance from the reference
  sphere surface, giving an analytic surface-distance baseline.
* ``warped-lung``: a lung-like textured volume deformed by a known smooth
  random lattice of bounded amplitude; registration should recover the
  field, measured as endpoint error against the stored truth lattice.

Both write MetaImage volumes/masks, a landmark file consistent with the
identity initialization, and a truth description.
"""

from __future__ import annotations

import json
import os

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .io import write_landmarks, write_lattice, write_metaimage
from .mask import BinaryMask
from .transform import ControlLattice, LandmarkSet, bspline_displacement, lattice_covering
from .volume import GridSpec, Volume, resample_with_transform


def _smooth_noise(rng, shape, sigma, lo, hi):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    field -= field.min()
    field /= max(field.max(), 1e-12)
    return lo + field * (hi - lo)


def _radial_profile(r, plateau_lo, plateau_hi, taper_in, taper_out):
    """Smooth bump: 1 on [plateau_lo, plateau_hi], cosine-tapered to 0 over
    ``taper_in``/``taper_out`` on either side."""
    g = np.zeros_like(r)
    g[(r >= plateau_lo) & (r <= plateau_hi)] = 1.0
    lo = (r > plateau_lo - taper_in) & (r < plateau_lo)
    g[lo] = 0.5 * (1.0 + np.cos(np.pi * (plateau_lo - r[lo]) / taper_in))
    hi = (r > plateau_hi) & (r < plateau_hi + taper_out)
    g[hi] = 0.5 * (1.0 + np.cos(np.pi * (r[hi] - plateau_hi) / taper_out))
    return g


def sphere_phantom(size: int = 48, radius: float = 16.0, offset_voxels: float = 4.0,
                   seed: int = 0) -> dict:
    """Textured sphere pair: the floating specimen is the reference warped
    by a radial contraction of ``offset_voxels`` at the sphere surface.

    Returns reference/floating volumes, registration masks (sphere plus a
    shell of context), exact-sphere evaluation masks, identity-consistent
    landmarks, and the truth parameters.
    """
    d = float(offset_voxels)
    if radius <= 3 * d:
        raise ValidationError("sphere radius must exceed 3x the surface offset")
    rng = np.random.default_rng(seed)
    grid = GridSpec((size, size, size), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    c = (size - 1) / 2.0
    zz, yy, xx = np.meshgrid(*(np.arange(size),) * 3, indexing="ij")
    r = np.sqrt((xx - c) ** 2 + (yy - c) ** 2 + (zz - c) ** 2)

    # the specimen (floating) sphere is d voxels smaller than the reference
    texture = _smooth_noise(rng, (size, size, size), 2.5, -150.0, 150.0)
    body = np.where(r <= radius - d, -100.0, -900.0)
    base = ndimage.gaussian_filter(body, 1.0) + texture
    floating = Volume(base, grid.spacing, grid.origin)

    # reference = floating pulled inward by d around the surface band, so
    # its boundary sits at ``radius`` exactly
    g = _radial_profile(r, radius - 1.5 * d, radius + 0.5 * d, 2.2 * d, 2.2 * d)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.stack([(xx - c), (yy - c), (zz - c)], axis=-1) / np.maximum(r, 1e-9)[..., None]
    disp = -d * g[..., None] * unit
    pts = grid.points() + disp.reshape(-1, 3)
    from .volume import _trilinear_index

    vals, inside = _trilinear_index(floating.data, pts)
    vals[~inside] = -900.0
    reference = Volume(vals.reshape(grid.shape), grid.spacing, grid.origin)

    ref_reg_mask = BinaryMask(r <= radius + 2 * d, grid.spacing, grid.origin)
    flo_reg_mask = BinaryMask(r <= radius + d, grid.spacing, grid.origin)
    ref_eval_mask = BinaryMask(r <= radius, grid.spacing, grid.origin)
    flo_eval_mask = BinaryMask(r <= radius - d, grid.spacing, grid.origin)

    lo = c - radius
    hi = c + radius
    pts_lm = np.array(
        [[lo, c, c], [hi, c, c], [c, lo, c], [c, c, hi], [c, hi, lo]], dtype=float
    )
    landmarks = LandmarkSet(pts_lm, pts_lm)

    return {
        "reference": reference,
        "floating": floating,
        "ref_mask": ref_reg_mask,
        "float_mask": flo_reg_mask,
        "eval_ref_mask": ref_eval_mask,
        "eval_float_mask": flo_eval_mask,
        "landmarks": landmarks,
        "truth": {
            "preset": "sphere",
            "size": size,
            "radius": radius,
            "offset_voxels": d,
            "seed": seed,
        },
    }


def _truth_lattice(rng, grid: GridSpec, cp_spacing: float, amplitude: float) -> ControlLattice:
    lo, hi = grid.extent()
    lat = lattice_covering(lo, hi, (cp_spacing,) * 3, margin_cp=1)
    coeffs = rng.standard_normal(lat.coefficients.shape)
    for axis in range(3):
        coeffs = ndimage.gaussian_filter1d(coeffs, 0.8, axis=axis, mode="nearest")
    lat = lat.with_coefficients(coeffs)

    from .penalty import sampled_determinants

    for _ in range(40):
        disp = bspline_displacement(lat, grid.points())
        peak = np.linalg.norm(disp, axis=1).max()
        coeffs = lat.coefficients * (amplitude / max(peak, 1e-9))
        lat = lat.with_coefficients(coeffs)
        if sampled_determinants(lat, grid).min() > 0.15:
            disp = bspline_displacement(lat, grid.points())
            if abs(np.linalg.norm(disp, axis=1).max() - amplitude) < 0.05 * amplitude:
                return lat
        amplitude *= 0.95
    raise ValidationError("could not build an unfolded truth lattice at this amplitude")


def warped_lung_phantom(size: int = 64, amplitude_voxels: float = 8.0,
                        cp_spacing_voxels: float = 16.0, seed: int = 0) -> dict:
    """Lung-like textured volume warped by a known smooth lattice.

    The reference is the floating texture composed with the truth warp, so
    the forward registration transform should reproduce the truth field.
    """
    rng = np.random.default_rng(seed)
    grid = GridSpec((size, size, size), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    c = (size - 1) / 2.0
    zz, yy, xx = np.meshgrid(*(np.arange(size),) * 3, indexing="ij")
    ax = (0.42 * size, 0.38 * size, 0.40 * size)
    rho = np.sqrt(
        ((xx - c) / ax[0]) ** 2 + ((yy - c) / ax[1]) ** 2 + ((zz - c) / ax[2]) ** 2
    )

    fine = _smooth_noise(rng, (size, size, size), 2.5, -250.0, 250.0)
    coarse = _smooth_noise(rng, (size, size, size), 5.0, -200.0, 200.0)
    lung = -750.0 + fine + coarse
    body = np.where(rho <= 1.0, lung, 50.0)
    base = ndimage.gaussian_filter(body, 1.0)
    floating = Volume(base, grid.spacing, grid.origin)

    truth = _truth_lattice(rng, grid, cp_spacing_voxels, amplitude_voxels)
    reference = resample_with_transform(floating, None, truth, grid, background=50.0)

    flo_mask_data = rho <= 0.92
    float_mask = BinaryMask(flo_mask_data, grid.spacing, grid.origin)
    warped_mask = resample_with_transform(
        Volume(flo_mask_data.astype(float), grid.spacing, grid.origin),
        None, truth, grid, background=0.0,
    )
    ref_mask = BinaryMask(warped_mask.data >= 0.5, grid.spacing, grid.origin)

    lo = c - 0.3 * size
    hi = c + 0.3 * size
    pts_lm = np.array(
        [[lo, c, c], [hi, c, c], [c, lo, c], [c, c, hi], [c, hi, lo]], dtype=float
    )
    landmarks = LandmarkSet(pts_lm, pts_lm)

    return {
        "reference": reference,
        "floating": floating,
        "ref_mask": ref_mask,
        "float_mask": float_mask,
        "truth_lattice": truth,
        "landmarks": landmarks,
        "truth": {
            "preset": "warped-lung",
            "size": size,
            "amplitude_voxels": amplitude_voxels,
            "cp_spacing_voxels": cp_spacing_voxels,
            "seed": seed,
        },
    }


def write_phantom(bundle: dict, out_dir) -> None:
    """Write a phantom bundle's artifacts into a directory."""
    os.makedirs(out_dir, exist_ok=True)
    write_metaimage(bundle["reference"], os.path.join(out_dir, "reference.mha"))
    write_metaimage(bundle["floating"], os.path.join(out_dir, "floating.mha"))
    write_metaimage(bundle["ref_mask"], os.path.join(out_dir, "ref_mask.mha"))
    write_metaimage(bundle["float_mask"], os.path.join(out_dir, "float_mask.mha"))
    for key, name in (
        ("eval_ref_mask", "eval_ref_mask.mha"),
        ("eval_float_mask", "eval_float_mask.mha"),
    ):
        if key in bundle:
            write_metaimage(bundle[key], os.path.join(out_dir, name))
    if "truth_lattice" in bundle:
        write_lattice(bundle["truth_lattice"], os.path.join(out_dir, "truth_lattice"))
    write_landmarks(bundle["landmarks"], os.path.join(out_dir, "landmarks.txt"))
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as f:
        json.dump(bundle["truth"], f, indent=2)
        f.write("\n")
