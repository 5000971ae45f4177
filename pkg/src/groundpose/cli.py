"""Command-line front end: ``estimate``, ``synth`` and ``bench``.

Exit codes: 0 success, 1 bad flags or I/O/parse errors, 2 estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import formats, p1p, synthbench
from .errors import PoseError
from .geometry import GroundFrame
from .pipeline import estimate, parse_method
from .ransac import GroundScene, RansacConfig
from .refine import RobustConfig

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not -(2**63) <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _methods(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    if not names:
        raise argparse.ArgumentTypeError("no methods given")
    for m in names:
        try:
            parse_method(m)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return names


def _add_ransac_flags(p):
    d = RansacConfig()
    p.add_argument("--inlier-threshold", type=float, default=d.inlier_threshold_px, help="t_in in pixels")
    p.add_argument("--max-iterations", type=int, default=d.max_iterations)
    p.add_argument("--confidence", type=float, default=d.confidence)


def _add_tau_flags(p):
    d = RobustConfig()
    p.add_argument("--tau1", type=float, default=d.tau1)
    p.add_argument("--tau2", type=float, default=d.tau2)
    p.add_argument("--tau3", type=float, default=d.tau3)


def _configs(args) -> tuple[RansacConfig, RobustConfig]:
    ransac_cfg = RansacConfig(args.inlier_threshold, args.max_iterations, args.confidence, args.seed)
    robust = RobustConfig(args.tau1, args.tau2, args.tau3)
    return ransac_cfg, robust


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groundpose", description="Ground-constrained object pose estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate object poses in a scene file")
    p.add_argument("scene", help="scene file")
    p.add_argument("--method", default="p1p+hre", help="<p1p|p3p>[+gn|+hre|+re]")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--shape-model", help="shape model file (overrides the scene's reference)")
    p.add_argument("--truth", help="ground-truth sidecar; fills in the error metrics")
    p.add_argument("--out", default="-", help="output file ('-' for stdout)")
    _add_ransac_flags(p)
    _add_tau_flags(p)

    p = sub.add_parser("synth", help="write synthetic scenes and ground truth")
    p.add_argument("--config", help="file of '<SynthConfig field> <value...>' lines")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=_seed, default=None)

    p = sub.add_parser("bench", help="run a synthetic experiment sweep")
    p.add_argument("experiment", choices=["e1", "e2", "e3", "e4", "hre3", "hre4"])
    p.add_argument("--trials", type=int, default=synthbench.SynthConfig().n_trials)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--methods", type=_methods, default=None, help="comma-separated, e.g. p1p+gn,p3p+gn")
    p.add_argument("--out", default=None, help="CSV path (default bench_<experiment>.csv); JSON goes alongside")
    p.add_argument("--timing", action="store_true", help="measure wall time (makes the CSV non-reproducible)")
    _add_ransac_flags(p)
    _add_tau_flags(p)
    return parser


# -- estimate ----------------------------------------------------------------


def _case_name(obj, scene: GroundScene, hyp) -> str:
    rows = np.flatnonzero(np.isin(obj.keypoints.ids, hyp.sample_ids))
    try:
        sol = p1p.solve(
            obj.keypoints.image[rows[0]], obj.keypoints.model[rows[0]], obj.bbox, obj.box3d, scene.K, scene.ground
        )
    except PoseError:
        return "unknown"
    return sol.case.name


def cmd_estimate(args) -> int:
    try:
        ransac_cfg, robust = _configs(args)
    except ValueError as exc:
        print(f"groundpose estimate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        solver, _ = parse_method(args.method)
        scene_file = formats.read_scene(args.scene)
        if args.shape_model:
            model = formats.read_shape_model(args.shape_model)
        else:
            model = formats.resolve_shape_model(args.scene, scene_file)
        truth = {}
        if args.truth:
            truth = {b["object"]: formats.record_pose(args.truth, b) for b in formats.read_records(args.truth)}
        ground = GroundFrame.from_degrees(scene_file.pitch_deg)
    except (OSError, ValueError) as exc:
        print(f"groundpose estimate: {exc}", file=sys.stderr)
        return EXIT_USAGE

    lines, failed = [], False
    for obj in scene_file.objects:
        lines.append(f"object {obj.name}")
        lines.append(f"method {args.method}")
        scene = GroundScene(scene_file.intrinsics, ground, obj.bbox)
        try:
            if len(obj.keypoints) == 0:
                raise PoseError("object has no keypoints")
            est = estimate(obj.keypoints, scene, args.method, obj.box3d, model, ransac_cfg, robust)
        except (PoseError, ValueError, IndexError) as exc:
            failed = True
            lines.append(f"status failed {type(exc).__name__}: {exc}")
            lines.append("end")
            continue
        lines.append("status ok")
        lines += formats.format_pose(est.pose)
        if solver == "p1p":
            lines.append(f"case {_case_name(obj, scene, est.ransac)}")
        lines.append("ransac_iterations " + str(est.ransac.iterations_run))
        ids = sorted(est.inlier_ids)
        lines.append("inliers " + " ".join(str(i) for i in [len(ids), *ids]))
        if model is not None and model.M:
            lines.append("coeffs " + " ".join(repr(float(c)) for c in est.coeffs))
        gt = truth.get(obj.name)
        if gt is not None:
            lines.append(f"e_r_deg {synthbench.rotation_error(est.pose.R, gt.R)!r}")
            lines.append(f"e_t_pct {synthbench.translation_error(est.pose.t, gt.t)!r}")
            lines.append(f"e_a_deg {synthbench.angular_translation_error(est.pose.t, gt.t)!r}")
        else:
            lines += ["e_r_deg na", "e_t_pct na", "e_a_deg na"]
        lines.append("end")

    text = "\n".join(lines) + "\n"
    try:
        if args.out == "-":
            sys.stdout.write(text)
        else:
            Path(args.out).write_text(text)
    except OSError as exc:
        print(f"groundpose estimate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_FAILED if failed else EXIT_OK


# -- synth -------------------------------------------------------------------


def read_synth_config(path) -> synthbench.SynthConfig:
    fields = {f.name: f for f in dataclasses.fields(synthbench.SynthConfig)}
    values = {}
    for lineno, key, rest in formats._tokens(path):
        if key not in fields:
            raise formats.ParseError(path, lineno, key, "unknown setting")
        default = getattr(synthbench.SynthConfig(), key)
        try:
            if isinstance(default, tuple):
                if len(rest) != 2:
                    raise ValueError("expected two numbers")
                values[key] = (float(rest[0]), float(rest[1]))
            elif len(rest) != 1:
                raise ValueError("expected one value")
            elif isinstance(default, int):
                values[key] = int(rest[0], 0)
            else:
                values[key] = float(rest[0])
        except ValueError as exc:
            raise formats.ParseError(path, lineno, key, str(exc)) from None
    return synthbench.SynthConfig(**values)


def synth_scene_file(s: synthbench.SynthScene, cfg: synthbench.SynthConfig, shape_ref: str | None) -> formats.SceneFile:
    obj = formats.SceneObject("object0", s.bbox, s.box3d, s.corrs)
    pitch = cfg.pitch_deg + cfg.pitch_error_deg
    return formats.SceneFile(s.scene.K, pitch, [obj], shape_ref)


def cmd_synth(args) -> int:
    try:
        cfg = read_synth_config(args.config) if args.config else synthbench.SynthConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        n = cfg.n_trials if args.trials is None else args.trials
        if n < 0:
            raise ValueError("--trials must be non-negative")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for trial in range(n):
            s = synthbench.generate(cfg, trial)
            shape_ref = None
            if cfg.n_shape_basis:
                shape_ref = f"shape_{trial:04d}.txt"
                formats.write_shape_model(out / shape_ref, s.shape_model)
            formats.write_scene(out / f"scene_{trial:04d}.txt", synth_scene_file(s, cfg, shape_ref))
            truth = ["object object0", f"trial {trial}", f"seed {cfg.seed}"]
            truth += formats.format_pose(s.gt_pose)
            truth.append(f"yaw_deg {math.degrees(s.yaw)!r}")
            truth.append(f"pitch_deg {cfg.pitch_deg!r}")
            if cfg.n_shape_basis:
                truth.append("coeffs " + " ".join(repr(float(c)) for c in s.coeffs_gt))
            inl = s.corrs.ids[s.inlier_mask]
            truth.append("inliers " + " ".join(str(int(i)) for i in [len(inl), *inl]))
            truth.append("end")
            (out / f"truth_{trial:04d}.txt").write_text("\n".join(truth) + "\n")
    except (OSError, ValueError) as exc:
        print(f"groundpose synth: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


# -- bench -------------------------------------------------------------------


def cmd_bench(args) -> int:
    try:
        ransac_cfg, robust = _configs(args)
        if args.trials < 1:
            raise ValueError("--trials must be positive")
    except ValueError as exc:
        print(f"groundpose bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    records = synthbench.run_experiment(
        args.experiment,
        methods=args.methods,
        n_trials=args.trials,
        seed=args.seed,
        ransac_cfg=ransac_cfg,
        robust=robust,
        timing=args.timing,
    )
    summaries = synthbench.aggregate(records)
    out = Path(args.out or f"bench_{args.experiment}.csv")
    try:
        synthbench.write_csv(out, summaries)
        synthbench.write_json(out.with_suffix(".json"), records, summaries)
    except OSError as exc:
        print(f"groundpose bench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(synthbench.format_table(summaries))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"estimate": cmd_estimate, "synth": cmd_synth, "bench": cmd_bench}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
