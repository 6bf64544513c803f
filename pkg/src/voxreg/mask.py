"""Binary masks and lung-region extraction by thresholding and morphology."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import SegmentationError, ValidationError
from .volume import Volume

_MORPH_OPS = ("erode", "dilate", "open", "close")


@dataclass(frozen=True)
class BinaryMask:
    """Voxel-aligned boolean mask, stored (nz, ny, nx) like :class:`Volume` data.

    ``spacing``/``origin`` are carried for file round-trips and surface
    extraction; they default to unit geometry when a mask is built from an
    array alone.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=bool))
        if arr.ndim != 3:
            raise ValidationError(f"mask data must be 3-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return (self.data.shape[2], self.data.shape[1], self.data.shape[0])

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def with_data(self, data: np.ndarray) -> "BinaryMask":
        return BinaryMask(data, self.spacing, self.origin)


def threshold(v: Volume, lo: float, hi: float) -> BinaryMask:
    """Mask of voxels with lo <= value <= hi (inclusive band)."""
    if lo > hi:
        raise ValidationError(f"threshold band inverted: lo={lo} > hi={hi}")
    return BinaryMask((v.data >= lo) & (v.data <= hi), v.spacing, v.origin)


def ball_structure(radius: int) -> np.ndarray:
    """Discrete Euclidean ball structuring element of the given voxel radius."""
    radius = int(radius)
    if radius < 1:
        raise ValidationError(f"structuring-element radius must be >= 1, got {radius}")
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return (xx * xx + yy * yy + zz * zz) <= radius * radius


def morphology(m: BinaryMask, op: str, radius: int) -> BinaryMask:
    """Binary morphology with a discrete ball structuring element.

    Outside-of-volume voxels count as background for dilation and as
    foreground for erosion, so erosion never eats inward from the border.
    ``open`` is erode-then-dilate, ``close`` dilate-then-erode.
    """
    if op not in _MORPH_OPS:
        raise ValidationError(f"unknown morphology op {op!r}, expected one of {_MORPH_OPS}")
    ball = ball_structure(radius)

    def erode(a):
        return ndimage.binary_erosion(a, structure=ball, border_value=1)

    def dilate(a):
        return ndimage.binary_dilation(a, structure=ball, border_value=0)

    a = m.data
    if op == "erode":
        out = erode(a)
    elif op == "dilate":
        out = dilate(a)
    elif op == "open":
        out = dilate(erode(a))
    else:
        out = erode(dilate(a))
    return m.with_data(out)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component(m: BinaryMask, connectivity: int = 6) -> BinaryMask:
    """Keep only the largest connected foreground component.

    Ties are broken by the component containing the smallest linear index.
    """
    if m.count == 0:
        raise SegmentationError("largest_component on an empty mask")
    labels, n = ndimage.label(m.data, structure=_connectivity_structure(connectivity))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if candidates.size > 1:
        flat = labels.ravel()
        first = {lab: np.argmax(flat == lab) for lab in candidates}
        winner = min(candidates, key=lambda lab: first[lab])
    else:
        winner = candidates[0]
    return m.with_data(labels == winner)


def _drop_border_components(data: np.ndarray, structure: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(data, structure=structure)
    if n == 0:
        return data
    border = np.zeros_like(data)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    touching = np.unique(labels[border & data])
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    keep[touching] = False
    return keep[labels]


@dataclass(frozen=True)
class LungMaskParams:
    """Band and cleanup parameters for lung extraction.

    Defaults suit clinical CT in Hounsfield units (air-to-parenchyma band);
    uncalibrated modalities must supply their own band.
    """

    lo: float = -1100.0
    hi: float = -400.0
    close_radius: int = 2
    min_volume_mm3: float = 1000.0


def lung_mask(v: Volume, params: LungMaskParams | None = None) -> BinaryMask:
    """Extract the lung-like region of a volume.

    Pipeline: intensity band threshold, removal of components touching the
    volume border (exterior air), largest remaining component, then
    morphological closing. Fails with :class:`SegmentationError` when the
    surviving component is smaller than ``min_volume_mm3``.

    The result never touches the volume boundary.
    """
    p = params or LungMaskParams()
    if p.lo > p.hi:
        raise ValidationError(f"lung_mask band inverted: {p.lo} > {p.hi}")
    band = threshold(v, p.lo, p.hi)
    if band.count == 0:
        raise SegmentationError(f"no voxels in band [{p.lo}, {p.hi}]")
    structure = _connectivity_structure(6)
    interior = _drop_border_components(band.data, structure)
    if not interior.any():
        raise SegmentationError("all in-band components touch the volume border")
    comp = largest_component(band.with_data(interior))
    if p.close_radius >= 1:
        comp = morphology(comp, "close", p.close_radius)
    data = np.array(comp.data)
    data[0, :, :] = data[-1, :, :] = False
    data[:, 0, :] = data[:, -1, :] = False
    data[:, :, 0] = data[:, :, -1] = False
    volume_mm3 = float(data.sum()) * v.voxel_volume
    if volume_mm3 < p.min_volume_mm3:
        raise SegmentationError(
            f"segmented component volume {volume_mm3:.1f} mm^3 is below the "
            f"minimum {p.min_volume_mm3} mm^3"
        )
    return band.with_data(data)
