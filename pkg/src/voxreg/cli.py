"""Batch command-line frontend chaining the registration pipeline.

Subcommands: mask, init, register, resample, evaluate, phantom. Exit codes
are stable: 0 success, 1 validation error (including unknown flags), 2
runtime/convergence error. Config values load from a JSON/TOML file, can
be overridden by VOXREG_-prefixed environment variables, and finally by
CLI flags. Every artifact lands on disk, so the chain can resume at any
stage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import ProcessingError, ValidationError, VoxregError
from .evaluation import (
    evaluate_registration,
    evaluate_registration_points,
    render_table,
)
from .mask import BinaryMask, LungMaskParams, lung_mask
from .optimizer import ObjectiveConfig, register
from .phantom import sphere_phantom, warped_lung_phantom, write_phantom
from .transform import AffineTransform, Transform, fit_affine_landmarks
from .volume import Volume, checkerboard, crop_to_extent, resample_with_transform
from . import io as vio

_ENV_PREFIX = "VOXREG_"
_CONFIG_OVERRIDES = {
    "alpha": float,
    "beta": float,
    "gamma": float,
    "bins": int,
    "levels": int,
    "max_iters_per_level": int,
    "final_cp_spacing_voxels": float,
    "convergence_tol": float,
    "min_samples": int,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _require_volume(obj, path) -> Volume:
    if not isinstance(obj, Volume):
        raise ValidationError(f"{path}: expected an image volume, found a binary mask")
    return obj


def _require_mask(obj, path) -> BinaryMask:
    if isinstance(obj, BinaryMask):
        return obj
    raise ValidationError(f"{path}: expected a binary mask (8-bit 0/1 values)")


def _cmd_mask(args) -> int:
    vol = _require_volume(vio.read_metaimage(args.input), args.input)
    params = LungMaskParams(
        lo=args.lo, hi=args.hi, close_radius=args.close_radius,
        min_volume_mm3=args.min_volume,
    )
    m = lung_mask(vol, params)
    vio.write_metaimage(m, args.out)
    print(f"mask: {m.count} voxels -> {args.out}")
    return 0


def _cmd_init(args) -> int:
    lm = vio.read_landmarks(args.landmarks)
    if args.mode == "similarity":
        from .transform import _fit_similarity

        affine = _fit_similarity(lm.sources, lm.targets)
    else:
        affine = fit_affine_landmarks(lm)
    vio.write_affine(affine, args.out)
    print(f"init: {len(lm)} landmarks, {affine.mode} fit -> {args.out}")
    return 0


def _load_config(args) -> ObjectiveConfig:
    cfg = vio.read_config(args.config) if args.config else ObjectiveConfig()
    values = cfg.to_dict()
    for key, cast in _CONFIG_OVERRIDES.items():
        env = os.environ.get(_ENV_PREFIX + key.upper())
        if env is not None:
            try:
                values[key] = cast(env)
            except ValueError as e:
                raise ValidationError(
                    f"environment override {_ENV_PREFIX + key.upper()}={env!r}: {e}"
                ) from e
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return ObjectiveConfig.from_dict(values)


def _cmd_register(args) -> int:
    cfg = _load_config(args)
    ref = _require_volume(vio.read_metaimage(args.ref), args.ref)
    flo = _require_volume(vio.read_metaimage(args.float), args.float)
    ref_mask = _require_mask(vio.read_metaimage(args.ref_mask), args.ref_mask)
    float_mask = _require_mask(vio.read_metaimage(args.float_mask), args.float_mask)
    affine = vio.read_affine(args.affine) if args.affine else AffineTransform.identity()

    if not args.no_crop:
        flo_lo, flo_hi = flo.grid.extent()
        corners = np.array(
            [[x, y, z] for x in (flo_lo[0], flo_hi[0])
             for y in (flo_lo[1], flo_hi[1]) for z in (flo_lo[2], flo_hi[2])]
        )
        mapped = affine.inverse().apply(corners)
        ref = crop_to_extent(ref, mapped.min(axis=0), mapped.max(axis=0),
                             margin_voxels=args.crop_margin)
        sl = tuple(
            slice(
                int(round((ref.origin[a] - ref_mask.origin[a]) / ref_mask.spacing[a])),
                int(round((ref.origin[a] - ref_mask.origin[a]) / ref_mask.spacing[a]))
                + ref.dims[a],
            )
            for a in (2, 1, 0)
        )
        ref_mask = BinaryMask(ref_mask.data[sl], ref.spacing, ref.origin)

    result = register(ref, flo, ref_mask, float_mask, affine, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    vio.write_result(result, args.out_dir)
    vio.write_metaimage(ref, os.path.join(args.out_dir, "reference_cropped.mha"))
    vio.write_metaimage(ref_mask, os.path.join(args.out_dir, "reference_mask_cropped.mha"))
    print(
        f"register: {cfg.levels} levels, converged={result.converged_levels} "
        f"-> {args.out_dir}"
    )
    return 0


def _cmd_resample(args) -> int:
    flo = _require_volume(vio.read_metaimage(args.float), args.float)
    like = vio.read_metaimage(args.like)
    grid = like.grid if isinstance(like, Volume) else None
    if grid is None:
        raise ValidationError(f"{args.like}: --like must be an image volume")
    affine = vio.read_affine(args.affine) if args.affine else None
    lattice = vio.read_lattice(args.lattice) if args.lattice else None
    out = resample_with_transform(flo, affine, lattice, grid, background=args.background)
    if args.checkerboard:
        out = checkerboard(like, out, args.checkerboard)
    if args.out.endswith(".png"):
        _write_slice_png(out, args.out)
    else:
        vio.write_metaimage(out, args.out)
    print(f"resample: -> {args.out}")
    return 0


def _write_slice_png(v: Volume, path) -> None:
    from PIL import Image

    mid = v.data[v.data.shape[0] // 2]
    lo, hi = np.percentile(mid, [1, 99])
    scaled = np.clip((mid - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    Image.fromarray((scaled * 255).astype(np.uint8)).save(path)


def _cmd_evaluate(args) -> int:
    ref_mask = _require_mask(vio.read_metaimage(args.ref_mask), args.ref_mask)
    if args.float_mask_native:
        if not args.backward_lattice:
            raise ValidationError("point mode needs --backward-lattice")
        native = _require_mask(
            vio.read_metaimage(args.float_mask_native), args.float_mask_native
        )
        affine = vio.read_affine(args.affine) if args.affine else AffineTransform.identity()
        lattice = vio.read_lattice(args.backward_lattice)
        report = evaluate_registration_points(
            ref_mask, native,
            before=Transform(affine.inverse(), None),
            after=Transform(affine.inverse(), lattice),
        )
    else:
        before = _require_mask(
            vio.read_metaimage(args.float_mask_before), args.float_mask_before
        )
        after = _require_mask(
            vio.read_metaimage(args.float_mask_after), args.float_mask_after
        )
        report = evaluate_registration(ref_mask, before, after)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
    print(render_table([("case 1", report.before, report.after)]))
    if report.p_value is not None:
        print(f"wilcoxon: statistic={report.statistic:.1f} p={report.p_value:.3e} "
              f"(n={report.n_pairs}, {report.pairing})")
    print(f"evaluate: -> {args.out}")
    return 0


def _cmd_phantom(args) -> int:
    if args.preset == "sphere":
        bundle = sphere_phantom(size=args.size or 48, seed=args.seed)
    else:
        bundle = warped_lung_phantom(size=args.size or 64, seed=args.seed)
    write_phantom(bundle, args.out_dir)
    print(f"phantom: {args.preset} -> {args.out_dir}")
    return 0


def _build_parser() -> _Parser:
    p = _Parser(prog="voxreg", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap the parallel width of internal kernels")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", help="extract a lung-like region mask")
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--lo", type=float, default=LungMaskParams.lo)
    m.add_argument("--hi", type=float, default=LungMaskParams.hi)
    m.add_argument("--close-radius", type=int, default=LungMaskParams.close_radius)
    m.add_argument("--min-volume", type=float, default=LungMaskParams.min_volume_mm3)
    m.set_defaults(func=_cmd_mask)

    i = sub.add_parser("init", help="fit the initial affine from landmarks")
    i.add_argument("--landmarks", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=("affine", "similarity"), default="affine")
    i.set_defaults(func=_cmd_init)

    r = sub.add_parser("register", help="run multi-level deformable registration")
    r.add_argument("--ref", required=True)
    r.add_argument("--float", required=True)
    r.add_argument("--ref-mask", required=True)
    r.add_argument("--float-mask", required=True)
    r.add_argument("--affine", default=None)
    r.add_argument("--config", default=None)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--no-crop", action="store_true",
                   help="skip cropping the reference to the mapped floating extent")
    r.add_argument("--crop-margin", type=int, default=10)
    for key, cast in _CONFIG_OVERRIDES.items():
        r.add_argument(f"--{key.replace('_', '-')}", type=cast, default=None, dest=key)
    r.set_defaults(func=_cmd_register)

    s = sub.add_parser("resample", help="warp the floating volume onto a target grid")
    s.add_argument("--float", required=True)
    s.add_argument("--affine", default=None)
    s.add_argument("--lattice", default=None,
                   help="lattice stem (reads <stem>.mha + <stem>.json)")
    s.add_argument("--like", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--background", type=float, default=-1024.0)
    s.add_argument("--checkerboard", type=int, default=None)
    s.set_defaults(func=_cmd_resample)

    e = sub.add_parser("evaluate", help="surface-distance evaluation report")
    e.add_argument("--ref-mask", required=True)
    e.add_argument("--float-mask-before")
    e.add_argument("--float-mask-after")
    e.add_argument("--out", required=True)
    e.add_argument("--float-mask-native", default=None,
                   help="native specimen mask: enables point-identity pairing")
    e.add_argument("--affine", default=None)
    e.add_argument("--backward-lattice", default=None,
                   help="backward (floating-to-reference) lattice stem for point mode")
    e.set_defaults(func=_cmd_evaluate)

    ph = sub.add_parser("phantom", help="generate ground-truth test pairs")
    ph.add_argument("--preset", choices=("sphere", "warped-lung"), required=True)
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--size", type=int, default=None)
    ph.set_defaults(func=_cmd_phantom)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "evaluate" and not args.float_mask_native:
            if not (args.float_mask_before and args.float_mask_after):
                raise ValidationError(
                    "evaluate needs --float-mask-before and --float-mask-after "
                    "(or --float-mask-native for point mode)"
                )
        if args.threads is not None:
            if args.threads < 1:
                raise ValidationError("--threads must be >= 1")
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except VoxregError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
