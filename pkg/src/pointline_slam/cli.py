"""Command-line entry point.

Subcommands:
    run       track a sequence end to end, writing trajectory and logs
    simulate  generate a synthetic sequence with ground truth
    evaluate  compare an estimated TUM trajectory against ground truth
    ggs       descriptor dissimilarity of two images, or a pairwise matrix

Exit codes: 0 success, 1 pipeline failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import RunConfig
from .evaluation import evaluate_trajectory
from .ggs import compute_ggs, dissimilarity_matrix, ggs_dissimilarity
from .pipeline import SlamSystem
from .sequence_io import SequenceError, load_image, load_sequence, read_tum, write_tum
from .synthetic import GenerationError, SceneSpec, generate_scene, write_sequence

USAGE_ERROR = 2
PIPELINE_ERROR = 1


def _build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        cfg.apply_overrides(args.set)
    if getattr(args, "no_dynamic", False):
        cfg.enable_dynamics = False
    if getattr(args, "no_loop", False):
        cfg.enable_loop = False
    if getattr(args, "no_lines", False):
        cfg.enable_lines = False
    if getattr(args, "strict_paper_lcd", False):
        cfg.strict_paper_lcd = True
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_run(args) -> int:
    cfg = _build_config(args)
    try:
        seq = load_sequence(args.sequence,
                            image_size=None if not args.image_size
                            else tuple(int(x) for x in args.image_size.split("x")))
    except SequenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    os.makedirs(args.out, exist_ok=True)
    header = cfg.echo()
    print(header)
    with open(os.path.join(args.out, "config_used.txt"), "w") as f:
        f.write(header + "\n")

    system = SlamSystem(seq.cam, cfg)
    t0 = time.perf_counter()
    try:
        for frame in seq:
            system.process_frame(frame)
        result = system.finalize()
    except SequenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:   # pipeline failure: report, non-zero exit
        print(f"pipeline error: {exc}", file=sys.stderr)
        return PIPELINE_ERROR
    elapsed = time.perf_counter() - t0

    write_tum(os.path.join(args.out, "trajectory.txt"), result.trajectory)
    with open(os.path.join(args.out, "keyframes.txt"), "w") as f:
        for kf_id, frame_index, ts in result.keyframes:
            f.write(f"{kf_id} {frame_index} {ts:.6f}\n")
    with open(os.path.join(args.out, "loop_events.csv"), "w") as f:
        f.write("current_kf,looped_kf,sim_v,ratio_inl,lc_rat,accepted\n")
        for ev in result.loop_events:
            f.write(f"{ev.current_kf},{ev.looped_kf},{ev.sim_v:.9f},"
                    f"{ev.ratio_inl:.6f},{ev.lc_rat:.9f},{int(ev.accepted)}\n")
    with open(os.path.join(args.out, "dynamics.csv"), "w") as f:
        f.write("frame,kind,ident,value,flagged\n")
        for frame_idx, kind, ident, value, flagged in result.dynamics_log:
            f.write(f"{frame_idx},{kind},{ident},{value:.6f},{int(flagged)}\n")
    with open(os.path.join(args.out, "timing.csv"), "w") as f:
        f.write("stage,frame,millis\n")
        for stage, frame_idx, millis in result.timings:
            f.write(f"{stage},{frame_idx},{millis:.3f}\n")

    n = len(result.trajectory)
    fps = n / elapsed if elapsed > 0 else float("inf")
    print(f"tracked {n} frames in {elapsed:.2f} s ({fps:.1f} fps), "
          f"{len(result.keyframes)} keyframes, "
          f"{sum(1 for e in result.loop_events if e.accepted)} loops accepted, "
          f"{result.tracking_failures} tracking failures")
    return 0


def cmd_simulate(args) -> int:
    try:
        spec = SceneSpec.from_json(args.spec) if args.spec else SceneSpec()
    except (OSError, ValueError) as exc:
        print(f"error: bad scene spec: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        scene = generate_scene(spec, seed=args.seed)
        write_sequence(scene, args.out, with_images=not args.no_images)
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    print(f"wrote {len(scene.frames)} frames to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    try:
        est = read_tum(args.estimated)
        gt = read_tum(args.ground_truth)
        metrics = evaluate_trajectory(est, gt)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    print(f"t-RMSE: {metrics.ate_rmse:.6f} m")
    print(f"R-RMSE: {metrics.rot_rmse_deg:.6f} deg")
    return 0


def cmd_ggs(args) -> int:
    try:
        if os.path.isdir(args.a):
            names = sorted(n for n in os.listdir(args.a)
                           if n.lower().endswith((".pgm", ".png")))
            if not names:
                print(f"error: no images under {args.a}", file=sys.stderr)
                return USAGE_ERROR
            descs = [compute_ggs(load_image(os.path.join(args.a, n))) for n in names]
            matrix = dissimilarity_matrix(descs)
            lines = ["name," + ",".join(names)]
            for name, row in zip(names, matrix):
                lines.append(name + "," + ",".join(f"{v:.9f}" for v in row))
            text = "\n".join(lines) + "\n"
            if args.matrix:
                with open(args.matrix, "w") as f:
                    f.write(text)
            else:
                print(text, end="")
            return 0
        if not args.b:
            print("error: need two images (or one directory)", file=sys.stderr)
            return USAGE_ERROR
        a = compute_ggs(load_image(args.a))
        b = compute_ggs(load_image(args.b))
        print(f"{ggs_dissimilarity(a, b):.9f}")
        return 0
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointline-slam",
                                description="Stereo point+line SLAM core")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="track a sequence")
    run.add_argument("sequence", help="sequence directory")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--set", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config value")
    run.add_argument("--no-dynamic", action="store_true",
                     help="disable dynamic-feature rejection")
    run.add_argument("--no-loop", action="store_true", help="disable loop closure")
    run.add_argument("--no-lines", action="store_true", help="points only")
    run.add_argument("--strict-paper-lcd", action="store_true",
                     help="apply the literal lc_rat acceptance rule")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--image-size", default=None, metavar="WxH",
                     help="image size for sequences without images")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="generate a synthetic sequence")
    sim.add_argument("--spec", help="scene spec JSON (file or literal)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--no-images", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", help="trajectory metrics")
    ev.add_argument("estimated")
    ev.add_argument("ground_truth")
    ev.set_defaults(func=cmd_evaluate)

    gg = sub.add_parser("ggs", help="descriptor dissimilarity")
    gg.add_argument("a", help="image A, or a directory for matrix mode")
    gg.add_argument("b", nargs="?", help="image B")
    gg.add_argument("--matrix", help="write the pairwise matrix CSV here")
    gg.set_defaults(func=cmd_ggs)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
