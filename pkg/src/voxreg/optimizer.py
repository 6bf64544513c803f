"""Weighted objective assembly and the coarse-to-fine optimization loop.

The objective trades masked NMI against the three regularizers:

    total = (1 - a - b - g) * S - a*C_smooth - b*C_volpres - g*C_inconsistency

where the inverse-consistency component enters as the mean squared
residual per contributing sample so all terms stay commensurate with the
per-sample penalty means.

Optimization is plain gradient ascent with a backtracking line search:
a step is accepted only if it strictly improves the total, which makes
accepted-step objective traces non-decreasing by construction. Forward
(reference to floating) and backward lattices are optimized jointly, each
with its own similarity, bending, and volume terms plus the shared
inverse-consistency coupling. Folding correction runs after every
accepted step.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import FoldingError, ValidationError
from .mask import BinaryMask
from .penalty import (
    BendingOperator,
    InverseConsistencyResult,
    correct_folding,
    inverse_consistency,
    volume_preservation_gb,
)
from .similarity import NmiWorkspace
from .transform import (
    AffineTransform,
    ControlLattice,
    GridBspline,
    Transform,
    lattice_covering,
    refine_lattice,
)
from .volume import GridSpec, PyramidLevel, Volume, build_pyramid


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights and schedule of the registration objective.

    The similarity weight is 1 - alpha - beta - gamma and must stay
    positive. Defaults follow the working parameter set: alpha = 1e-4,
    beta = 1e-12, gamma = 0.1, four levels, 500 iterations per level,
    final control-point spacing of 5 voxels on the finest grid.
    """

    alpha: float = 1e-4
    beta: float = 1e-12
    gamma: float = 0.1
    bins: int = 64
    levels: int = 4
    max_iters_per_level: int = 500
    final_cp_spacing_voxels: float = 5.0
    convergence_tol: float = 1e-6
    line_search_max_trials: int = 8
    line_search_shrink: float = 0.5
    line_search_armijo: float = 1e-2
    min_samples: int = 1000
    use_float_mask: bool = False
    initial_step_voxels: float = 0.4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("objective weights alpha, beta, gamma must be >= 0")
        if self.alpha + self.beta + self.gamma >= 1.0:
            raise ValidationError(
                "alpha + beta + gamma must be < 1 so the similarity weight "
                f"1 - alpha - beta - gamma stays positive (got {self.alpha} + "
                f"{self.beta} + {self.gamma})"
            )
        if self.bins < 8:
            raise ValidationError("bins must be >= 8")
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if self.max_iters_per_level < 1:
            raise ValidationError("max_iters_per_level must be >= 1")
        if self.final_cp_spacing_voxels <= 0:
            raise ValidationError("final_cp_spacing_voxels must be positive")
        if self.convergence_tol <= 0:
            raise ValidationError("convergence_tol must be positive")
        if self.line_search_max_trials < 1:
            raise ValidationError("line_search_max_trials must be >= 1")
        if not 0 < self.line_search_shrink < 1:
            raise ValidationError("line_search_shrink must be in (0, 1)")

    @property
    def similarity_weight(self) -> float:
        return 1.0 - self.alpha - self.beta - self.gamma

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(
                f"unknown config keys {sorted(unknown)}; expected a subset of {sorted(known)}"
            )
        return cls(**d)


@dataclass(frozen=True)
class TraceRow:
    """One accepted optimization step (iteration 0 is the initial state)."""

    iteration: int
    similarity: float
    bending: float
    volpres: float
    inconsistency: float
    total: float

    def as_tuple(self) -> tuple:
        return (
            self.iteration,
            self.similarity,
            self.bending,
            self.volpres,
            self.inconsistency,
            self.total,
        )


@dataclass
class LevelResult:
    forward: ControlLattice
    backward: ControlLattice
    trace: list
    converged: bool
    stationary: bool = False


@dataclass
class RegistrationResult:
    """Full multi-level output: per-level lattices, traces, and flags."""

    affine: AffineTransform
    forward_lattices: list
    backward_lattices: list
    objective_trace: list
    converged_levels: list
    config: ObjectiveConfig
    level_spacings: list

    @property
    def forward(self) -> Transform:
        return Transform(self.affine, self.forward_lattices[-1])

    @property
    def backward(self) -> Transform:
        return Transform(self.affine.inverse(), self.backward_lattices[-1])


def combine_objective(
    cfg: ObjectiveConfig,
    similarity: float,
    bending: float,
    volpres: float,
    inconsistency: float,
) -> float:
    """The weighted total of one direction's components."""
    return (
        cfg.similarity_weight * similarity
        - cfg.alpha * bending
        - cfg.beta * volpres
        - cfg.gamma * inconsistency
    )


def objective(
    ref: Volume,
    flo: Volume,
    forward: Transform,
    backward: Transform,
    mask: BinaryMask,
    cfg: ObjectiveConfig,
    float_mask: BinaryMask | None = None,
):
    """Forward-direction objective total with its components.

    S is the NMI of the forward transform; bending and volume terms are
    evaluated on the forward lattice over the mask's bounding-box grid;
    the inverse-consistency component is shared between directions and
    reported as the per-sample mean. Returns (total, components dict).
    """
    ws = NmiWorkspace(
        ref, flo, mask, cfg.bins, min_samples=cfg.min_samples,
        float_mask=float_mask if cfg.use_float_mask else None,
    )
    _, s_value = ws.evaluate(forward)
    domain = ws.bbox_grid
    if forward.lattice is not None:
        bend, _ = BendingOperator(forward.lattice, domain).value_and_gradient(
            forward.lattice.coefficients
        )
        volp, _ = volume_preservation_gb(
            GridBspline(forward.lattice, domain), forward.lattice.coefficients
        )
    else:
        bend = 0.0
        volp = 0.0
    if forward.lattice is None and backward.lattice is None:
        inc_mean = 0.0
        n_samples = 0
    else:
        float_domain = flo.grid if float_mask is None else NmiWorkspace(
            flo, ref, float_mask, cfg.bins, min_samples=1
        ).bbox_grid
        inc = inverse_consistency(
            forward, backward, domain, float_domain, want_gradient=False
        )
        n_samples = inc.n_samples
        inc_mean = inc.value / max(inc.n_samples, 1)
    total = combine_objective(cfg, s_value, bend, volp, inc_mean)
    components = {
        "similarity": s_value,
        "bending": bend,
        "volpres": volp,
        "inconsistency": inc_mean,
        "inconsistency_samples": n_samples,
        "total": total,
    }
    return total, components


class _LevelEngine:
    """Joint forward+backward objective/gradient evaluator for one level.

    Caches the similarity workspaces, bending Gram operators, and grid
    evaluators; evaluations then only pay for transform-dependent work.
    """

    def __init__(
        self,
        level: PyramidLevel,
        fwd_lat: ControlLattice,
        bwd_lat: ControlLattice,
        affine: AffineTransform,
        cfg: ObjectiveConfig,
        min_samples: int,
    ):
        self.cfg = cfg
        self.affine = affine
        self.affine_inv = affine.inverse()
        self.fwd_geom = fwd_lat
        self.bwd_geom = bwd_lat
        self.ws_f = NmiWorkspace(
            level.reference, level.floating, level.reference_mask, cfg.bins,
            min_samples=min_samples,
            float_mask=level.floating_mask if cfg.use_float_mask else None,
        )
        self.ws_b = NmiWorkspace(
            level.floating, level.reference, level.floating_mask, cfg.bins,
            min_samples=min_samples,
            float_mask=level.reference_mask if cfg.use_float_mask else None,
        )
        self.ref_dom = self.ws_f.bbox_grid
        self.flo_dom = self.ws_b.bbox_grid
        self.bend_f = BendingOperator(fwd_lat, self.ref_dom)
        self.bend_b = BendingOperator(bwd_lat, self.flo_dom)
        self.gb_f = GridBspline(fwd_lat, self.ref_dom)
        self.gb_b = GridBspline(bwd_lat, self.flo_dom)

    def transforms(self, cf: np.ndarray, cb: np.ndarray) -> tuple:
        return (
            Transform(self.affine, self.fwd_geom.with_coefficients(cf)),
            Transform(self.affine_inv, self.bwd_geom.with_coefficients(cb)),
        )

    def evaluate(self, cf: np.ndarray, cb: np.ndarray, want_gradient: bool = False):
        """Joint objective; returns (row_values, grad_f, grad_b).

        ``row_values`` is (similarity, bending, volpres, inconsistency_mean,
        total) with direction sums for the first three.
        """
        cfg = self.cfg
        tf, tb = self.transforms(cf, cb)
        if want_gradient:
            _, s_f, gs_f = self.ws_f.evaluate(tf, want_gradient=True)
            _, s_b, gs_b = self.ws_b.evaluate(tb, want_gradient=True)
        else:
            _, s_f = self.ws_f.evaluate(tf)
            _, s_b = self.ws_b.evaluate(tb)
        b_f, gb_f = self.bend_f.value_and_gradient(cf)
        b_b, gb_b = self.bend_b.value_and_gradient(cb)
        v_f, gv_f = volume_preservation_gb(self.gb_f, cf)
        v_b, gv_b = volume_preservation_gb(self.gb_b, cb)
        inc = inverse_consistency(
            tf, tb, self.ref_dom, self.flo_dom, fwd_gb=self.gb_f, bwd_gb=self.gb_b,
            want_gradient=want_gradient,
        )
        n_inc = max(inc.n_samples, 1)
        inc_mean = inc.value / n_inc
        total = (
            cfg.similarity_weight * (s_f + s_b)
            - cfg.alpha * (b_f + b_b)
            - cfg.beta * (v_f + v_b)
            - cfg.gamma * inc_mean
        )
        values = (s_f + s_b, b_f + b_b, v_f + v_b, inc_mean, total)
        if not want_gradient:
            return values, None, None
        grad_f = (
            cfg.similarity_weight * gs_f
            - cfg.alpha * gb_f
            - cfg.beta * gv_f
            - (cfg.gamma / n_inc) * inc.grad_forward
        )
        grad_b = (
            cfg.similarity_weight * gs_b
            - cfg.alpha * gb_b
            - cfg.beta * gv_b
            - (cfg.gamma / n_inc) * inc.grad_backward
        )
        return values, grad_f, grad_b

    def repair(self, cf: np.ndarray, cb: np.ndarray) -> tuple:
        """Folding correction of both lattices on their domains."""
        lat_f, rep_f = correct_folding(
            self.fwd_geom.with_coefficients(cf), self.ref_dom, gb=self.gb_f
        )
        lat_b, rep_b = correct_folding(
            self.bwd_geom.with_coefficients(cb), self.flo_dom, gb=self.gb_b
        )
        changed = rep_f.iterations > 0 or rep_b.iterations > 0
        return lat_f.coefficients, lat_b.coefficients, changed


def optimize_level(
    level: PyramidLevel,
    fwd: ControlLattice,
    bwd: ControlLattice,
    cfg: ObjectiveConfig,
    affine: AffineTransform | None = None,
    min_samples: int | None = None,
) -> LevelResult:
    """Gradient ascent with backtracking line search on one pyramid level.

    Steps are accepted only on strict improvement of the joint total;
    folding correction runs after each accepted step (a correction that
    breaks the improvement rejects the step instead). Stops at
    ``max_iters_per_level`` or after 5 consecutive accepted steps with
    relative improvement below ``convergence_tol``. A zero gradient at the
    first iteration returns the inputs with the stationary flag set.
    """
    affine = affine or AffineTransform.identity()
    engine = _LevelEngine(
        level, fwd, bwd, affine, cfg,
        min_samples=cfg.min_samples if min_samples is None else min_samples,
    )
    cf = fwd.coefficients.copy()
    cb = bwd.coefficients.copy()
    cf, cb, _ = engine.repair(cf, cb)

    values, grad_f, grad_b = engine.evaluate(cf, cb, want_gradient=True)
    trace = [TraceRow(0, *values)]
    total = values[-1]
    h = min(level.target_spacing)
    step = None
    streak = 0
    converged = False
    stationary = False
    accepted_steps = 0

    for iteration in range(1, cfg.max_iters_per_level + 1):
        gmax = max(np.abs(grad_f).max(), np.abs(grad_b).max())
        if gmax <= 0.0:
            if iteration == 1:
                stationary = True
            converged = True
            break
        if step is None:
            step = cfg.initial_step_voxels * h / gmax

        # sufficient-increase rule: the step must realize a fraction of the
        # gain its own gradient predicts, which screens out the tiny
        # histogram-sharpening drift available at stationary alignments
        gsq = float(np.vdot(grad_f, grad_f) + np.vdot(grad_b, grad_b))
        accepted = False
        trial_step = step
        for _ in range(cfg.line_search_max_trials):
            tf_c = cf + trial_step * grad_f
            tb_c = cb + trial_step * grad_b
            try:
                tf_c, tb_c, changed = engine.repair(tf_c, tb_c)
                trial_values, _, _ = engine.evaluate(tf_c, tb_c)
            except FoldingError:
                trial_step *= cfg.line_search_shrink
                continue
            if trial_values[-1] > total + cfg.line_search_armijo * trial_step * gsq:
                accepted = True
                break
            trial_step *= cfg.line_search_shrink

        if not accepted:
            converged = True
            break

        rel = (trial_values[-1] - total) / max(abs(total), 1e-12)
        cf, cb = tf_c, tb_c
        total = trial_values[-1]
        accepted_steps += 1
        trace.append(TraceRow(iteration, *trial_values))
        step = trial_step * 2.0
        if rel < cfg.convergence_tol:
            streak += 1
            if streak >= 5:
                converged = True
                break
        else:
            streak = 0
        values, grad_f, grad_b = engine.evaluate(cf, cb, want_gradient=True)

    return LevelResult(
        forward=fwd.with_coefficients(cf),
        backward=bwd.with_coefficients(cb),
        trace=trace,
        converged=converged,
        stationary=stationary,
    )


def _effective_min_samples(cfg: ObjectiveConfig, mask: BinaryMask) -> int:
    # coarse pyramid levels can have fewer voxels than the standalone
    # histogram floor; scale it down rather than refusing to start
    return int(min(cfg.min_samples, max(32, mask.count // 2)))


def register(
    ref: Volume,
    flo: Volume,
    ref_mask: BinaryMask,
    float_mask: BinaryMask,
    affine: AffineTransform | None = None,
    cfg: ObjectiveConfig | None = None,
) -> RegistrationResult:
    """Multi-level symmetric registration of a floating to a reference volume.

    ``affine`` maps reference points into the floating frame (identity if
    None); it is held fixed while the forward and backward displacement
    lattices are optimized coarse to fine. The coarsest lattices start at
    ``2**(levels-1) * final_cp_spacing_voxels`` finest voxels so dyadic
    refinement lands exactly on the requested final spacing.

    A level that cannot be unfolded raises :class:`FoldingError` with the
    partial result attached as ``err.partial_result``.
    """
    cfg = cfg or ObjectiveConfig()
    affine = affine or AffineTransform.identity()
    pyramid = build_pyramid(ref, flo, ref_mask, float_mask, cfg.levels)
    finest = pyramid[-1].target_spacing
    factor = 2 ** (cfg.levels - 1)
    coarse_spacing = tuple(cfg.final_cp_spacing_voxels * s * factor for s in finest)

    ref_lo, ref_hi = ref.grid.extent()
    flo_lo, flo_hi = flo.grid.extent()
    fwd = lattice_covering(ref_lo, ref_hi, coarse_spacing, margin_cp=2)
    bwd = lattice_covering(flo_lo, flo_hi, coarse_spacing, margin_cp=2)

    forward_lattices = []
    backward_lattices = []
    traces = []
    converged = []
    spacings = []
    for level in pyramid:
        if level.level_index > 0:
            fwd = refine_lattice(fwd)
            bwd = refine_lattice(bwd)
        min_samples = _effective_min_samples(cfg, level.reference_mask)
        try:
            result = optimize_level(level, fwd, bwd, cfg, affine, min_samples=min_samples)
        except FoldingError as err:
            err.partial_result = RegistrationResult(
                affine, forward_lattices, backward_lattices, traces, converged,
                cfg, spacings,
            )
            raise
        fwd = result.forward
        bwd = result.backward
        forward_lattices.append(fwd)
        backward_lattices.append(bwd)
        traces.append(result.trace)
        converged.append(result.converged)
        spacings.append(level.target_spacing)

    return RegistrationResult(
        affine=affine,
        forward_lattices=forward_lattices,
        backward_lattices=backward_lattices,
        objective_trace=traces,
        converged_levels=converged,
        config=cfg,
        level_spacings=spacings,
    )
