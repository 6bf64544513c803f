import numpy as np
import pytest
from scipy import ndimage

import voxreg as vr
from voxreg.errors import OverlapError, ValidationError
from voxreg.similarity import (
    IntensityWindow,
    JointHistogram,
    NmiWorkspace,
    joint_histogram,
    nmi,
    nmi_gradient,
)
from voxreg.transform import Transform

from conftest import interior_mask, smooth_volume


def kernel_b3(s):
    s = abs(s)
    if s < 1.0:
        return 2.0 / 3.0 - s * s + s**3 / 2.0
    if s < 2.0:
        return (2.0 - s) ** 3 / 6.0
    return 0.0


def histogram_oracle(ref, flo, mask, bins, rw, fw):
    """Loop voxels, expand the Parzen kernel weights explicitly
    (identity transform, shared grid)."""
    counts = np.zeros((bins, bins))
    for k in range(ref.data.shape[0]):
        for j in range(ref.data.shape[1]):
            for i in range(ref.data.shape[2]):
                if not mask.data[k, j, i]:
                    continue
                r = ref.data[k, j, i]
                w = flo.data[k, j, i]
                if not (rw.lo <= r <= rw.hi) or not (fw.lo <= w <= fw.hi):
                    continue
                ridx = min(int((r - rw.lo) * bins / (rw.hi - rw.lo)), bins - 1)
                bf = 1.0 + (w - fw.lo) * (bins - 4) / (fw.hi - fw.lo)
                b0 = min(max(int(np.floor(bf)), 1), bins - 3)
                for b in range(b0 - 1, b0 + 3):
                    counts[ridx, b] += kernel_b3(bf - b)
    return counts


class TestJointHistogram:
    def test_self_registration_structure(self, rng):
        # intensities exactly at floating bin centers: row mass equals the
        # bin occupancy and the reference marginal is exact
        bins = 12
        vals = rng.integers(0, bins - 4, size=(6, 6, 6)).astype(float)
        v = vr.Volume(vals, (1.0, 1.0, 1.0))
        mask = vr.BinaryMask(np.ones((6, 6, 6), bool))
        fw = IntensityWindow(0.0, float(bins - 4))
        rw = IntensityWindow(0.0, float(bins - 4))
        h = joint_histogram(
            v, v, Transform(), mask, bins=bins, window=(rw, fw), min_samples=10
        )
        occupancy = np.zeros(bins)
        for val in vals.ravel():
            ridx = min(int(val * bins / (bins - 4)), bins - 1)
            occupancy[ridx] += 1
        assert np.allclose(h.marginal_r, occupancy, atol=1e-9)
        assert h.total == pytest.approx(216.0)
        # each row's mass sits within the 3 kernel bins around its center
        for ridx in np.nonzero(occupancy)[0]:
            row = h.counts[ridx]
            assert row.sum() == pytest.approx(occupancy[ridx], rel=1e-12)

    def test_minimum_contributing_voxels(self, rng):
        v = smooth_volume(rng, n=12)
        m = np.zeros((12, 12, 12), bool)
        m.ravel()[:999] = True
        with pytest.raises(OverlapError):
            joint_histogram(v, v, Transform(), vr.BinaryMask(m), bins=16)

    def test_matches_deposition_oracle(self, rng):
        ref = vr.Volume(rng.uniform(0, 100, size=(4, 4, 4)), (1.0, 1.0, 1.0))
        flo = vr.Volume(rng.uniform(0, 100, size=(4, 4, 4)), (1.0, 1.0, 1.0))
        mask = vr.BinaryMask(np.ones((4, 4, 4), bool))
        rw = IntensityWindow(0.0, 100.0)
        fw = IntensityWindow(0.0, 100.0)
        h = joint_histogram(
            ref, flo, Transform(), mask, bins=8, window=(rw, fw), min_samples=1
        )
        expected = histogram_oracle(ref, flo, mask, 8, rw, fw)
        assert np.allclose(h.counts, expected, atol=1e-12)
        assert np.allclose(h.marginal_r, expected.sum(axis=1), atol=1e-12)
        assert np.allclose(h.marginal_f, expected.sum(axis=0), atol=1e-12)

    def test_bins_validation(self, rng):
        v = smooth_volume(rng, n=8)
        with pytest.raises(ValidationError):
            joint_histogram(v, v, Transform(), vr.BinaryMask(np.ones((8, 8, 8), bool)),
                            bins=4)


class TestNmi:
    def test_identical_images_nearest_bin(self, rng):
        v = smooth_volume(rng, n=12)
        mask = vr.BinaryMask(np.ones((12, 12, 12), bool))
        w = IntensityWindow(float(v.data.min()), float(v.data.max()))
        h = joint_histogram(v, v, Transform(), mask, bins=16, window=(w, w),
                            parzen=False)
        assert nmi(h) == pytest.approx(2.0, abs=1e-9)

    def test_independent_images(self):
        d_r = np.zeros((12, 12, 12))
        d_r[:, :, 6:] = 1.0
        d_f = np.zeros((12, 12, 12))
        d_f[:, 6:, :] = 1.0
        w = IntensityWindow(-0.5, 1.5)
        h = joint_histogram(
            vr.Volume(d_r, (1, 1, 1)), vr.Volume(d_f, (1, 1, 1)), Transform(),
            vr.BinaryMask(np.ones((12, 12, 12), bool)), bins=8, window=(w, w),
            parzen=False,
        )
        assert nmi(h) == pytest.approx(1.0, abs=1e-9)

    def test_two_by_two_hand_computation(self):
        h = JointHistogram.from_counts(np.array([[2.0, 1.0], [1.0, 2.0]]))
        # direct-summation oracle
        p = h.counts / 6.0
        hj = -sum(pi * np.log(pi) for pi in p.ravel())
        hr = -sum(pi * np.log(pi) for pi in p.sum(axis=1))
        hf = -sum(pi * np.log(pi) for pi in p.sum(axis=0))
        assert nmi(h) == pytest.approx((hr + hf) / hj, rel=1e-12)
        # hand evaluation: marginals are (1/2, 1/2) so Hr = Hf = ln 2
        assert hr == pytest.approx(np.log(2.0))

    def test_degenerate_single_cell(self):
        counts = np.zeros((8, 8))
        counts[3, 4] = 10.0
        value, degenerate = nmi(JointHistogram.from_counts(counts), with_flag=True)
        assert value == 2.0 and degenerate

    def test_range_invariant(self, rng):
        for _ in range(20):
            h = JointHistogram.from_counts(rng.uniform(0, 5, size=(8, 8)))
            val = nmi(h)
            assert 1.0 - 1e-12 <= val <= 2.0 + 1e-12

    def test_permutation_invariance(self, rng):
        counts = rng.uniform(0, 5, size=(8, 8))
        base = nmi(JointHistogram.from_counts(counts))
        perm = rng.permutation(8)
        assert nmi(JointHistogram.from_counts(counts[:, perm])) == pytest.approx(
            base, rel=1e-12
        )
        assert nmi(JointHistogram.from_counts(counts[perm, :])) == pytest.approx(
            base, rel=1e-12
        )

    def test_offset_invariance(self, rng):
        ref = smooth_volume(rng, n=12)
        flo = smooth_volume(rng, n=12)
        mask = vr.BinaryMask(np.ones((12, 12, 12), bool))
        rw = IntensityWindow(0.0, 1000.0)
        fw = IntensityWindow(0.0, 1000.0)
        h1 = joint_histogram(ref, flo, Transform(), mask, bins=16, window=(rw, fw),
                             min_samples=100)
        off = 250.0
        ref2 = vr.Volume(ref.data + off, ref.spacing)
        rw2 = IntensityWindow(0.0 + off, 1000.0 + off)
        h2 = joint_histogram(ref2, flo, Transform(), mask, bins=16, window=(rw2, fw),
                             min_samples=100)
        assert np.allclose(h1.counts, h2.counts, atol=1e-9)
        assert nmi(h1) == pytest.approx(nmi(h2), rel=1e-12)


def fd_gradient_check(ws, lat, coeffs, grad, rng, n_trials, step, skip_below):
    errs = []
    gz, gy, gx, _ = coeffs.shape
    trials = 0
    while trials < n_trials:
        i = (rng.integers(gz), rng.integers(gy), rng.integers(gx), rng.integers(3))
        if abs(grad[i]) < skip_below:
            continue
        cp = coeffs.copy()
        cm = coeffs.copy()
        cp[i] += step
        cm[i] -= step
        _, vp = ws.evaluate(Transform(None, lat.with_coefficients(cp)))
        _, vm = ws.evaluate(Transform(None, lat.with_coefficients(cm)))
        fd = (vp - vm) / (2 * step)
        errs.append(abs(grad[i] - fd) / max(abs(fd), abs(grad[i])))
        trials += 1
    return errs


class TestNmiGradient:
    def _fixture(self, rng, n=32):
        # the floating grid is offset so warped points sit away from the
        # trilinear cell corners, where the interpolant's gradient jumps
        ref = smooth_volume(rng, n=n, sigma=2.5)
        flo = vr.Volume(ndimage.gaussian_filter(ref.data, 1.5) * 0.9 + 30.0,
                        ref.spacing, origin=(0.37, 0.41, 0.43))
        mask = interior_mask(n, 5)
        lat = vr.lattice_covering(
            (0.0, 0.0, 0.0), (n - 1.0,) * 3, (8.0, 8.0, 8.0), margin_cp=1
        )
        return ref, flo, mask, lat

    def test_single_component_finite_difference(self, rng):
        ref, flo, mask, lat0 = self._fixture(rng)
        coeffs = rng.normal(scale=0.5, size=lat0.coefficients.shape)
        lat = lat0.with_coefficients(coeffs)
        ws = NmiWorkspace(ref, flo, mask, bins=32, min_samples=100)
        _, _, grad = ws.evaluate(Transform(None, lat), want_gradient=True)
        gscale = np.abs(grad).max()
        errs = fd_gradient_check(ws, lat0, coeffs, grad, rng, 10, 1e-2,
                                 skip_below=1e-3 * gscale)
        assert max(errs) < 1e-3

    def test_constant_floating_gradient_is_zero(self, rng):
        ref = smooth_volume(rng, n=16)
        flo = vr.Volume(np.full((16, 16, 16), 5.0), (1.0, 1.0, 1.0))
        mask = interior_mask(16, 3)
        lat = vr.lattice_covering((0.0, 0.0, 0.0), (15.0,) * 3, (6.0,) * 3,
                                  margin_cp=1)
        lat = lat.with_coefficients(rng.normal(scale=0.3, size=lat.coefficients.shape))
        value, grad = nmi_gradient(
            ref, flo, Transform(None, lat), mask, bins=16,
            window=(None, IntensityWindow(0.0, 10.0)), min_samples=50,
        )
        assert np.all(grad == 0.0)

    def test_self_similarity_near_stationary(self, rng):
        # identical images at identity: the sharpening pressure left by the
        # one-sided Parzen deposition is small next to the gradient of a
        # genuine one-voxel misalignment (exact zero is structurally
        # unreachable: the kernel's marginal support always has edges)
        n = 32
        ref = smooth_volume(rng, n=n, sigma=2.5)
        mask = interior_mask(n, 4)
        lat = vr.lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3,
                                  (8.0, 8.0, 8.0), margin_cp=1)
        ws = NmiWorkspace(ref, ref, mask, bins=32, min_samples=100)
        _, _, g_self = ws.evaluate(Transform(None, lat), want_gradient=True)
        shift = lat.with_coefficients(
            np.broadcast_to([1.0, 0.0, 0.0], lat.coefficients.shape).copy()
        )
        _, _, g_shift = ws.evaluate(Transform(None, shift), want_gradient=True)
        assert np.linalg.norm(g_self) < 0.1 * np.linalg.norm(g_shift)

    def test_twenty_random_perturbations(self, rng):
        # the gradient-check property at module scale
        ref, flo, mask, lat0 = self._fixture(rng)
        coeffs = rng.normal(scale=0.5, size=lat0.coefficients.shape)
        lat = lat0.with_coefficients(coeffs)
        ws = NmiWorkspace(ref, flo, mask, bins=32, min_samples=100)
        _, _, grad = ws.evaluate(Transform(None, lat), want_gradient=True)
        gscale = np.abs(grad).max()
        errs = fd_gradient_check(ws, lat0, coeffs, grad, rng, 20, 1e-3,
                                 skip_below=1e-3 * gscale)
        assert max(errs) < 1e-3


class TestWindow:
    def test_percentile_window(self, rng):
        vals = rng.normal(size=10000)
        w = IntensityWindow.from_percentiles(vals)
        assert w.lo == pytest.approx(np.percentile(vals, 0.1))
        assert w.hi == pytest.approx(np.percentile(vals, 99.9))

    def test_invalid_window(self):
        with pytest.raises(ValidationError):
            IntensityWindow(5.0, 5.0)
        with pytest.raises(ValidationError):
            IntensityWindow(0.0, 1.0, policy="wrap")
