import numpy as np
import pytest
from scipy import ndimage

import voxreg as vr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_volume(rng, n=24, sigma=2.5, lo=0.0, hi=1000.0, spacing=(1.0, 1.0, 1.0)):
    """Band-limited random texture, the standard fixture for similarity and
    gradient checks (cell-face kinks stay small)."""
    data = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), sigma)
    data -= data.min()
    data /= max(data.max(), 1e-12)
    return vr.Volume(lo + data * (hi - lo), spacing)


def interior_mask(n, margin, spacing=(1.0, 1.0, 1.0)):
    m = np.zeros((n, n, n), dtype=bool)
    m[margin:-margin, margin:-margin, margin:-margin] = True
    return vr.BinaryMask(m, spacing)


@pytest.fixture
def smooth_pair(rng):
    """Reference/floating pair with shared structure plus contrast change."""
    ref = smooth_volume(rng, n=24)
    flo = vr.Volume(ndimage.gaussian_filter(ref.data, 1.2) * 0.8 + 50.0, ref.spacing)
    return ref, flo
