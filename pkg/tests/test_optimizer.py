import numpy as np
import pytest
from scipy import ndimage

import voxreg as vr
from voxreg.errors import ValidationError
from voxreg.optimizer import (
    ObjectiveConfig,
    combine_objective,
    objective,
    optimize_level,
    register,
)
from voxreg.penalty import sampled_determinants
from voxreg.transform import GridBspline, Transform, bspline_displacement, lattice_covering
from voxreg.volume import PyramidLevel

from conftest import interior_mask, smooth_volume


class TestObjectiveConfig:
    def test_paper_default_weights(self):
        cfg = ObjectiveConfig()
        assert cfg.alpha == 1e-4 and cfg.beta == 1e-12 and cfg.gamma == 0.1
        assert cfg.levels == 4 and cfg.max_iters_per_level == 500
        assert cfg.final_cp_spacing_voxels == 5.0
        assert cfg.similarity_weight == pytest.approx(0.8999, rel=1e-10)

    def test_weight_constraint(self):
        with pytest.raises(ValidationError):
            ObjectiveConfig(alpha=0.5, beta=0.3, gamma=0.2)
        with pytest.raises(ValidationError):
            ObjectiveConfig(alpha=-0.1)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValidationError):
            ObjectiveConfig.from_dict({"alphaa": 0.1})


class TestObjective:
    def test_hand_weighted_sum(self):
        cfg = ObjectiveConfig(alpha=0.1, beta=0.1, gamma=0.1)
        total = combine_objective(cfg, 1.5, 2.0, 1.0, 3.0)
        assert total == pytest.approx(0.7 * 1.5 - 0.2 - 0.1 - 0.3)
        assert total == pytest.approx(0.45)

    def test_zero_weights_collapse_to_similarity(self, rng):
        ref = smooth_volume(rng, n=16)
        flo = vr.Volume(ndimage.gaussian_filter(ref.data, 1.0), ref.spacing)
        mask = interior_mask(16, 2)
        lat = lattice_covering((0.0, 0.0, 0.0), (15.0,) * 3, (6.0,) * 3, margin_cp=1)
        cfg = ObjectiveConfig(alpha=0.0, beta=0.0, gamma=0.0, bins=16, min_samples=100)
        fwd = Transform(vr.AffineTransform.identity(), lat)
        bwd = Transform(vr.AffineTransform.identity(), lat)
        total, comps = objective(ref, flo, fwd, bwd, mask, cfg)
        assert total == pytest.approx(comps["similarity"], rel=1e-12)

    def test_components_reported(self, rng):
        ref = smooth_volume(rng, n=16)
        flo = vr.Volume(ndimage.gaussian_filter(ref.data, 1.0), ref.spacing)
        mask = interior_mask(16, 2)
        lat = lattice_covering((0.0, 0.0, 0.0), (15.0,) * 3, (6.0,) * 3, margin_cp=1)
        lat = lat.with_coefficients(
            rng.normal(scale=0.3, size=lat.coefficients.shape)
        )
        cfg = ObjectiveConfig(bins=16, min_samples=100)
        fwd = Transform(vr.AffineTransform.identity(), lat)
        bwd = Transform(vr.AffineTransform.identity(), lat.zero_like())
        total, comps = objective(ref, flo, fwd, bwd, mask, cfg)
        assert comps["bending"] > 0
        assert comps["volpres"] > 0
        assert comps["inconsistency"] > 0
        expected = combine_objective(
            cfg, comps["similarity"], comps["bending"], comps["volpres"],
            comps["inconsistency"],
        )
        assert total == pytest.approx(expected, rel=1e-12)


def make_level(ref, flo, mask):
    return PyramidLevel(0, ref, flo, mask, mask, ref.spacing)


class TestOptimizeLevel:
    def test_self_registration_stays_put(self, rng):
        # at histogram-stable sampling density the self state is a
        # line-search dead end and the lattices stay exactly at zero
        n = 32
        ref = smooth_volume(rng, n=n)
        mask = interior_mask(n, 3)
        lat = lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3, (5.0,) * 3, margin_cp=2)
        cfg = ObjectiveConfig(levels=1, max_iters_per_level=40, bins=32,
                              min_samples=100)
        res = optimize_level(make_level(ref, ref, mask), lat, lat, cfg)
        # no spurious drift at the self-similarity optimum
        assert np.abs(res.forward.coefficients).max() < 0.1 * min(ref.spacing)
        assert res.converged

    def test_trace_is_non_decreasing(self, rng):
        n = 24
        ref = smooth_volume(rng, n=n)
        warped = np.roll(ref.data, 1, axis=1)
        flo = vr.Volume(ndimage.gaussian_filter(warped, 0.8), ref.spacing)
        mask = interior_mask(n, 3)
        lat = lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3, (6.0,) * 3, margin_cp=2)
        cfg = ObjectiveConfig(levels=1, max_iters_per_level=25, bins=24,
                              min_samples=100)
        res = optimize_level(make_level(ref, flo, mask), lat, lat, cfg)
        totals = [row.total for row in res.trace]
        assert len(totals) > 1
        assert all(b > a for a, b in zip(totals, totals[1:]))

    def test_zero_gradient_returns_stationary(self):
        n = 16
        const_r = vr.Volume(np.full((n, n, n), 100.0), (1.0, 1.0, 1.0))
        const_f = vr.Volume(np.full((n, n, n), 70.0), (1.0, 1.0, 1.0))
        mask = interior_mask(n, 2)
        lat = lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3, (8.0,) * 3, margin_cp=2)
        cfg = ObjectiveConfig(levels=1, max_iters_per_level=10, bins=8, min_samples=10)
        res = optimize_level(make_level(const_r, const_f, mask), lat, lat, cfg)
        assert res.stationary
        assert np.array_equal(res.forward.coefficients, lat.coefficients)

    def test_synthetic_warp_recovery(self, rng):
        n = 24
        base = smooth_volume(rng, n=n, sigma=2.0)
        truth = lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3, (8.0,) * 3,
                                 margin_cp=1)
        coeffs = ndimage.gaussian_filter(
            rng.normal(scale=1.0, size=truth.coefficients.shape), 0.8
        )
        disp = bspline_displacement(
            truth.with_coefficients(coeffs), base.grid.points()
        )
        scale = 2.0 / np.linalg.norm(disp, axis=1).max()
        truth = truth.with_coefficients(coeffs * scale)
        ref = vr.resample_with_transform(base, None, truth, base.grid,
                                         background=float(base.data.mean()))
        mask = interior_mask(n, 4)
        lat = lattice_covering((0.0, 0.0, 0.0), (n - 1.0,) * 3, (8.0,) * 3,
                               margin_cp=2)
        cfg = ObjectiveConfig(levels=1, max_iters_per_level=80, bins=24,
                              min_samples=100, gamma=0.05)
        res = optimize_level(make_level(ref, base, mask), lat, lat, cfg)
        pts = base.grid.points()[mask.data.ravel()]
        rec = bspline_displacement(res.forward, pts, with_inside=True)[0]
        gt = bspline_displacement(truth, pts)
        err = np.linalg.norm(rec - gt, axis=1)
        assert err.mean() < 1.0


class TestRegister:
    def test_lattice_spacing_schedule(self, rng):
        n = 32
        ref = smooth_volume(rng, n=n)
        flo = vr.Volume(ndimage.gaussian_filter(ref.data, 0.8), ref.spacing)
        mask = interior_mask(n, 3)
        cfg = ObjectiveConfig(levels=2, max_iters_per_level=3, bins=16,
                              final_cp_spacing_voxels=5.0, min_samples=100)
        res = register(ref, flo, mask, mask, None, cfg)
        # coarsest starts at 2^(levels-1) * final spacing, refinement halves
        assert res.forward_lattices[0].spacing == pytest.approx(
            tuple(10.0 * s for s in flo.spacing), abs=1e-12
        )
        for a in range(3):
            assert res.forward_lattices[-1].spacing[a] == pytest.approx(
                5.0 * flo.spacing[a], abs=1e-9
            )

    def test_identity_case_mean_displacement(self, rng):
        n = 24
        ref = smooth_volume(rng, n=n)
        mask = interior_mask(n, 3)
        cfg = ObjectiveConfig(levels=2, max_iters_per_level=40, bins=24,
                              min_samples=64)
        res = register(ref, ref, mask, mask, None, cfg)
        lat = res.forward_lattices[-1]
        gb = GridBspline(lat, ref.grid)
        disp = gb.displacement(lat.coefficients).reshape(-1, 3)
        mag = np.linalg.norm(disp, axis=1)[mask.data.ravel()]
        assert mag.mean() < 0.1 * min(ref.spacing)

    def test_returned_lattices_unfolded(self, rng):
        n = 24
        ref = smooth_volume(rng, n=n)
        flo = vr.Volume(np.roll(ref.data, 1, axis=2), ref.spacing)
        mask = interior_mask(n, 3)
        cfg = ObjectiveConfig(levels=2, max_iters_per_level=15, bins=16,
                              min_samples=64)
        res = register(ref, flo, mask, mask, None, cfg)
        for lat in res.forward_lattices + res.backward_lattices:
            assert sampled_determinants(lat, ref.grid).min() > 0.0

    def test_traces_non_decreasing_every_level(self, rng):
        n = 24
        ref = smooth_volume(rng, n=n)
        flo = vr.Volume(ndimage.gaussian_filter(np.roll(ref.data, 1, axis=0), 0.8),
                        ref.spacing)
        mask = interior_mask(n, 3)
        cfg = ObjectiveConfig(levels=2, max_iters_per_level=15, bins=16,
                              min_samples=64)
        res = register(ref, flo, mask, mask, None, cfg)
        for trace in res.objective_trace:
            totals = [row.total for row in trace]
            assert all(b >= a for a, b in zip(totals, totals[1:]))
