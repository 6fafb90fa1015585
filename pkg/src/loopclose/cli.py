"""``loopclose`` command line: synth, detect, optimize, evaluate, sweep.

Exit codes: 0 success, 1 ran but found no loop (detect only), 2 usage or
input error, 3 internal numeric failure.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io, metrics, posegraph, synth
from .detector import DetectorConfig, Keyframe, run_sequence
from .errors import Diverged, LoopCloseError, ParseError

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# flag name -> DetectorConfig field
CONFIG_FLAGS = {
    "k": "k",
    "cadence": "cadence",
    "max_dist": "max_distance",
    "min_matches": "min_matches",
    "min_gap": "min_loop_gap",
    "fast_threshold": "fast_threshold",
}
RUN_KEYS = {f.name for f in fields(DetectorConfig)} | {"format", "axis_map", "seed", "jobs", "baseline"}


class UsageError(Exception):
    pass


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file of settings; command-line flags take precedence")
    p.add_argument("--k", type=int)
    p.add_argument("--cadence", type=int)
    p.add_argument("--max-dist", type=int)
    p.add_argument("--min-matches", type=int)
    p.add_argument("--min-gap", type=int)
    p.add_argument("--fast-threshold", type=int)


def _add_traj_flags(p):
    p.add_argument("--format", choices=("kitti", "tum"))
    p.add_argument("--axis-map", choices=io.AXIS_MAPS)


def _load_config_file(path):
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    unknown = set(data) - RUN_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return data


def resolve(args):
    """Merge defaults < config file < flags; returns (DetectorConfig, other settings dict)."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    det = {f.name: file_cfg[f.name] for f in fields(DetectorConfig) if f.name in file_cfg}
    for flag, name in CONFIG_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            det[name] = val
    extra = {"format": "kitti", "axis_map": "xy", "jobs": 1, "baseline": None}
    extra.update({k: file_cfg[k] for k in extra if k in file_cfg})
    for k in extra:
        val = getattr(args, k, None)
        if val is not None:
            extra[k] = val
    try:
        return DetectorConfig(**det), extra
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _planar_frames(frames, axis_map):
    """Re-express keyframe poses so the detector's x-y projection follows ``axis_map``."""
    if axis_map == "xy":
        return frames
    return [Keyframe(f.index, posegraph.to_matrix(io.planar_pose(f.pose, axis_map)), f.image, f.mask, f.features)
            for f in frames]


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    spec_kw = dict(shape=args.shape, num_poses=args.poses, scale=args.scale, seed=args.seed,
                   drift_rot=args.drift_rot, drift_trans=args.drift_trans, noise_rot=args.noise_rot,
                   noise_trans=args.noise_trans, laps=args.laps, feature_mode=args.mode,
                   landmarks_per_cell=args.landmarks_per_cell)
    ds = synth.generate(synth.WorldSpec(**spec_kw))
    if args.plant is not None:
        ds = synth.plant_matches(ds, args.plant)
    io.save_dataset(ds, args.out)
    print(f"{ds.name}: {len(ds)} poses, {len(ds.revisit_pairs)} revisit pairs, mode {args.mode} -> {args.out}")
    return EXIT_OK


def cmd_detect(args):
    cfg, extra = resolve(args)
    frames = io.load_keyframes(args.data, args.trajectory, extra["format"])
    frames = _planar_frames(frames, extra["axis_map"])
    report = run_sequence(frames, cfg, baseline=extra["baseline"] == "fullscan")
    report.notes.insert(0, f"axis_map={extra['axis_map']} format={extra['format']}")
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{len(report.events)} loop events, comparisons {report.comparisons_windowed}/"
          f"{report.comparisons_fullscan}", file=sys.stderr)
    return EXIT_OK if report.events else EXIT_NEGATIVE


def cmd_optimize(args):
    _, extra = resolve(args)
    fmt, axis_map = extra["format"], extra["axis_map"]
    poses3d = io.load_trajectory(args.trajectory, fmt)
    report = io.load_detection_report(args.report)
    planar = [io.planar_pose(T, axis_map) for T in poses3d]
    gt = None
    if args.gt:
        gt = [io.planar_pose(T, axis_map) for T in io.load_trajectory(args.gt, fmt)]
        if len(gt) != len(planar):
            raise UsageError(f"ground truth has {len(gt)} poses, trajectory has {len(planar)}")
    graph = posegraph.build_from_trajectory(planar)
    for event, meas in zip(report.events, io.loop_measurements(report.events, gt)):
        graph = posegraph.add_loop_edge(graph, event, meas)
    result, stats = posegraph.optimize(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corrected = [io.lift_planar(T, p, axis_map) for T, p in zip(poses3d, result.poses())]
    if not report.events:
        corrected = poses3d  # nothing to correct: pass the input through untouched
    io.save_trajectory(corrected, out / f"corrected.{'txt' if fmt == 'kitti' else 'tum'}", fmt)
    io.save_g2o(graph, out / "graph_input.g2o")
    io.save_g2o(result, out / "graph_optimized.g2o")
    print(f"{len(report.events)} loop edges; objective {stats.initial_objective:.6g} -> "
          f"{stats.final_objective:.6g} in {stats.iterations} iterations")
    return EXIT_OK


def cmd_evaluate(args):
    _, extra = resolve(args)
    fmt, axis_map = extra["format"], extra["axis_map"]
    est = [io.planar_pose(T, axis_map) for T in io.load_trajectory(args.est, fmt)]
    gt = [io.planar_pose(T, axis_map) for T in io.load_trajectory(args.gt, fmt)]
    rep = metrics.evaluate(est, gt, align=args.align)
    text = f"# axis_map {axis_map}\n# align {args.align}\n" + rep.to_tsv()
    if args.out:
        Path(args.out).write_text(text)
        Path(str(args.out) + ".series").write_text(rep.segment_series(est, gt))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args):
    cfg, extra = resolve(args)
    if args.corpus:
        root = Path(args.corpus)
        corpus = [io.load_dataset(d) for d in sorted(p for p in root.iterdir() if (p / "spec.json").exists())]
        if not corpus:
            raise UsageError(f"no datasets under {root}")
    else:
        corpus = synth.standard_corpus()
    if args.k_min < 1 or args.k_max < args.k_min:
        raise UsageError("need 1 <= --k-min <= --k-max")
    rep = metrics.success_sweep(corpus, range(args.k_min, args.k_max + 1), cfg, jobs=extra["jobs"])
    header = "# config " + " ".join(f"{k}={v}" for k, v in cfg.as_dict().items() if k != "k") + "\n"
    text = header + rep.to_tsv()
    if args.out:
        Path(args.out).write_text(text)
        Path(str(args.out) + ".series").write_text(rep.series())
    sys.stdout.write(text)
    print(f"minimal K: {rep.minimal_k if rep.minimal_k is not None else 'none'}"
          + ("" if rep.is_monotone() else f"; non-monotone: {', '.join(rep.anomalies)}"), file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="loopclose", description="Geometric-window loop closure toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--shape", choices=synth.SHAPES, default="square")
    p.add_argument("--poses", type=int, default=80)
    p.add_argument("--scale", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laps", type=int, default=2)
    p.add_argument("--drift-rot", type=float, default=0.0)
    p.add_argument("--drift-trans", type=float, default=0.0)
    p.add_argument("--noise-rot", type=float, default=0.0)
    p.add_argument("--noise-trans", type=float, default=0.0)
    p.add_argument("--mode", choices=synth.FEATURE_MODES, default="images")
    p.add_argument("--landmarks-per-cell", type=int, default=2)
    p.add_argument("--plant", type=int, help="descriptor mode: re-plant exactly N shared descriptors per revisit")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="run loop detection over a dataset directory")
    p.add_argument("--data", required=True, help="directory with images/ (and masks/) or features.lcfc")
    p.add_argument("--trajectory", default="odom.txt", help="pose file, relative to --data unless absolute")
    p.add_argument("--baseline", choices=("fullscan",))
    p.add_argument("--out")
    _add_config_flags(p)
    _add_traj_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("optimize", help="add detected loops to the pose graph and optimise")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--gt", help="ground-truth trajectory supplying loop-edge measurements")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_traj_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="trajectory error table")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--align", choices=("rigid2d", "none"), default="rigid2d")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_traj_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="loop-detection success over a range of K")
    p.add_argument("--corpus", help="directory of dataset directories (default: built-in 5-world corpus)")
    p.add_argument("--k-min", type=int, default=4)
    p.add_argument("--k-max", type=int, default=20)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        return args.func(args)
    except (Diverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"loopclose: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParseError as exc:
        print(f"loopclose: parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, LoopCloseError, OSError, ValueError) as exc:
        print(f"loopclose: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
