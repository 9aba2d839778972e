"""``mcpseg`` command line: scan generation, training, online segmentation,
evaluation and the context-size sweep.

Every subcommand exits 0 on success and 1 with a one-line ``error:`` message
on failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import network as net
from .globalmap import read_snapshot
from .metrics import EvalPair, Report, evaluate, write_report
from .pipeline import PipelineConfig, run, stage_training_batches
from .pointcloud import export_colored, load_environment, pca_to_rgb, save_environment
from .raytrace import (DEFAULT_CELL, DEFAULT_MAX_RANGE, DEFAULT_SPACING, build_occupancy,
                       load_scans, load_trajectory, save_trajectory, simulate_trajectory,
                       write_dataset)
from .scenes import TWO_ROOM_HELDOUT, TWO_ROOM_TRAIN, corridor_scene, two_room_scene


class CommandError(Exception):
    pass


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _m_list(text):
    try:
        ms = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ms or min(ms) < 1:
        raise argparse.ArgumentTypeError("context sizes must be positive integers")
    return ms


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _pipeline_config(args, use_mcp, checkpoint=None) -> PipelineConfig:
    return PipelineConfig(radius=args.radius, batch_n=args.batch_n, context_m=args.context_m,
                          beta=getattr(args, "beta", 0.9), use_mcp=use_mcp, seed=args.seed,
                          cell_size=args.cell, horizontal=not args.radius_3d,
                          checkpoint=checkpoint)


def _load_dataset(path):
    scans, floor_z = load_scans(_require(path, "dataset"))
    if not scans:
        raise CommandError(f"empty manifest: {path}")
    if floor_z is None:
        floor_z = float(min(s.cloud.positions[:, 2].min() for s in scans if len(s.cloud)))
    return scans, floor_z


# -- subcommands -----------------------------------------------------------

def cmd_make_scene(args):
    builders = {"two-room": two_room_scene, "corridor": corridor_scene}
    env = builders[args.scene](args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_environment(out / "environment.txt", env)
    if args.scene == "two-room":
        save_trajectory(out / "train_trajectory.txt", TWO_ROOM_TRAIN)
        save_trajectory(out / "heldout_trajectory.txt", TWO_ROOM_HELDOUT)
    else:
        save_trajectory(out / "trajectory.txt", [[1.0, 1.2, 1.3], [20.0, 1.2, 1.3]])
    print(f"wrote {len(env.cloud)} points to {out / 'environment.txt'}")


def cmd_gen_scans(args):
    env = load_environment(_require(args.env, "environment file"))
    waypoints = load_trajectory(_require(args.trajectory, "trajectory file"))
    index = build_occupancy(env, args.cell)
    t0 = time.perf_counter()
    scans = simulate_trajectory(waypoints, index, args.spacing, args.h_res, args.v_res,
                                args.max_range)
    manifest = write_dataset(args.out_dir, scans, env.floor_z)
    print(f"{len(scans)} scans in {time.perf_counter() - t0:.1f}s -> {manifest}")


LOSS_HEADER = "epoch,step,ce,triplet,loss,accuracy"


def cmd_train(args):
    scans, floor_z = _load_dataset(args.dataset)
    if args.config:
        cfg = net.TrainConfig.from_file(_require(args.config, "training config"))
    else:
        cfg = net.TrainConfig(epochs=args.epochs, lr=args.lr, batch_n=args.batch_n,
                              context_m=args.context_m, margin=args.margin, lam=args.lam,
                              seed=args.seed, use_mcp=args.use_mcp,
                              checkpoint_every=args.checkpoint_every)
    params = state = None
    start = 0
    if args.resume:
        params, state, start = net.load_checkpoint(_require(args.resume, "checkpoint"))
        if params.use_mcp != cfg.use_mcp:
            raise CommandError("--resume checkpoint and --use-mcp/--no-mcp disagree")
        if start >= cfg.epochs:
            raise CommandError(f"checkpoint already at epoch {start} >= --epochs {cfg.epochs}")
    pcfg = PipelineConfig(radius=args.radius, batch_n=cfg.batch_n, context_m=cfg.context_m,
                          use_mcp=cfg.use_mcp, seed=cfg.seed, cell_size=args.cell,
                          horizontal=not args.radius_3d)
    batches = stage_training_batches(scans, floor_z, pcfg, with_context=cfg.use_mcp)
    if not batches:
        raise CommandError("no training points within the scan radius")
    dtype = np.float32 if args.float32 else np.float64
    ckpt = Path(args.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    loss_csv = Path(args.loss_csv) if args.loss_csv else ckpt.with_suffix(".loss.csv")
    mode = "a" if args.resume and loss_csv.exists() else "w"
    with open(loss_csv, mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write(LOSS_HEADER + "\n")

        def log(row):
            fh.write(f"{row['epoch']},{row['step']},{row['ce']:.8f},{row['triplet']:.8f},"
                     f"{row['loss']:.8f},{row['accuracy']:.6f}\n")
            fh.flush()
            if not args.quiet:
                print(f"epoch {row['epoch']:4d}  loss {row['loss']:.4f}  "
                      f"ce {row['ce']:.4f}  triplet {row['triplet']:.4f}  acc {row['accuracy']:.3f}")

        res = net.train(batches, cfg, params, state, start, ckpt, dtype=dtype, log=log)
    net.save_checkpoint(ckpt, res.params, res.state, res.epoch)
    print(f"{len(batches)} batches, epoch {res.epoch}, step {res.state.step} -> {ckpt}")


def cmd_segment(args):
    params, _, _ = net.load_checkpoint(_require(args.checkpoint, "checkpoint"))
    scans, floor_z = _load_dataset(args.dataset)
    cfg = _pipeline_config(args, params.use_mcp, str(args.checkpoint))
    out = Path(args.out_dir)
    log = None if args.quiet else (
        lambda st: print(f"scan {st.index:5d}  kept {st.points_kept:6d}  new {st.new_points:6d}  "
                         f"instances {st.instances:6d}  {st.ms_elapsed:8.1f} ms"))
    res = run(scans, floor_z, params, cfg, out_dir=out, log=log)
    gm = res.gmap
    n = len(gm)
    pos = gm.positions[:n]
    export_colored(pos, np.maximum(gm.pred_class[:n], 0), "class", out / "class.ply")
    export_colored(pos, gm.instance_id[:n], "instance", out / "instance.ply")
    export_colored(pos, pca_to_rgb(gm.embeddings[:n]), "embedding", out / "embedding.ply")
    if res.report is not None:
        print(_summary_line(res.report))


def _summary_line(report: Report) -> str:
    return "  ".join(f"{k} {v:.4f}" for k, v in report.summary().items())


def cmd_eval(args):
    snap = read_snapshot(_require(args.snapshot, "snapshot"))
    if (snap.pred_class < 0).any() or (snap.instance_id < 0).any():
        raise CommandError(f"{args.snapshot}: snapshot has points without predictions")
    report = evaluate(EvalPair(snap.gt_class, snap.pred_class, snap.gt_instance, snap.instance_id))
    write_report(args.out, report)
    print(_summary_line(report))


def cmd_sweep_context(args):
    scans, floor_z = _load_dataset(args.dataset)
    rows = []
    for m in args.m_list:
        ckpt = args.checkpoint.format(M=m)
        params, _, _ = net.load_checkpoint(_require(ckpt, "checkpoint"))
        if not params.use_mcp:
            raise CommandError(f"{ckpt}: sweep needs a checkpoint trained with context pooling")
        args.context_m = m
        cfg = _pipeline_config(args, True, ckpt)
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = run(scans, floor_z, params, cfg)
            times.append(time.perf_counter() - t0)
        rate = len(scans) / float(np.median(times))
        rows.append((m, res.report.point_acc, rate))
        print(f"M={m:4d}  accuracy {res.report.point_acc:.4f}  {rate:.3f} scans/s")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("M,accuracy,scans_per_sec\n"
                   + "".join(f"{m},{a:.6f},{r:.6f}\n" for m, a, r in rows), encoding="utf-8")


# -- argument parsing --------------------------------------------------------

def _add_pipeline_flags(p, beta=False):
    p.add_argument("--radius", type=_positive(float), default=2.0,
                   help="keep points within this distance of the scanner, m")
    p.add_argument("--radius-3d", action="store_true",
                   help="measure the radius in 3D instead of on the floor plane")
    p.add_argument("--batch-n", type=_positive(int), default=256, help="points per network batch")
    p.add_argument("--context-m", type=_positive(int), default=50, help="context points per point")
    p.add_argument("--cell", type=_positive(float), default=DEFAULT_CELL, help="voxel size, m")
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    if beta:
        p.add_argument("--beta", type=float, default=0.9,
                       help="cosine similarity threshold for joining clusters")
    p.add_argument("--quiet", action="store_true", help="suppress per-step progress lines")


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for optional paths that have none."""

    def _get_help_string(self, action):
        if action.default is None or isinstance(action, argparse._StoreFalseAction):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    parser = argparse.ArgumentParser(prog="mcpseg", description=__doc__.split("\n\n")[0],
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", formatter_class=fmt,
                       help="write a procedural labeled scene and its trajectories")
    p.add_argument("out_dir")
    p.add_argument("--scene", choices=("two-room", "corridor"), default="two-room",
                   help="which scene to build")
    p.add_argument("--seed", type=int, default=0, help="scene jitter seed")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("gen-scans", formatter_class=fmt,
                       help="ray-trace scans along a trajectory into a dataset directory")
    p.add_argument("env", help="labeled environment point file")
    p.add_argument("trajectory", help="waypoint file, one 'x y z' per line")
    p.add_argument("out_dir")
    p.add_argument("--spacing", type=_positive(float), default=DEFAULT_SPACING,
                   help="distance between scans along the trajectory, m")
    p.add_argument("--h-res", type=_positive(float), default=1.0, help="azimuth step, degrees")
    p.add_argument("--v-res", type=_positive(float), default=1.0, help="elevation step, degrees")
    p.add_argument("--max-range", type=_positive(float), default=DEFAULT_MAX_RANGE,
                   help="ray length, m")
    p.add_argument("--cell", type=_positive(float), default=DEFAULT_CELL,
                   help="occupancy voxel size, m")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; ray tracing is exact")
    p.set_defaults(func=cmd_gen_scans)

    p = sub.add_parser("train", formatter_class=fmt, help="train the network on a scan dataset")
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("checkpoint", help="output checkpoint path")
    p.add_argument("--epochs", type=_positive(int), default=100, help="passes over the dataset")
    p.add_argument("--lr", type=_positive(float), default=0.001, help="ADAM learning rate")
    p.add_argument("--margin", type=_positive(float), default=1.0, help="triplet margin")
    p.add_argument("--lam", type=float, default=1.0, help="triplet loss weight")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--use-mcp", dest="use_mcp", action="store_true", default=True,
                   help="train with context pooling")
    g.add_argument("--no-mcp", dest="use_mcp", action="store_false",
                   help="train without context pooling")
    p.add_argument("--checkpoint-every", type=int, default=10, help="epochs between checkpoints")
    p.add_argument("--resume", metavar="CKPT", help="continue from a saved checkpoint")
    p.add_argument("--config", help="key=value training config file (overrides flags)")
    p.add_argument("--loss-csv", help="loss log path (default: <checkpoint>.loss.csv)")
    p.add_argument("--float32", action="store_true", help="single precision (faster)")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", formatter_class=fmt,
                       help="run online segmentation over a scan dataset")
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    _add_pipeline_flags(p, beta=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", formatter_class=fmt, help="score a map snapshot")
    p.add_argument("snapshot")
    p.add_argument("out", help="metrics report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-context", formatter_class=fmt,
                       help="accuracy and scan rate as a function of context size")
    p.add_argument("dataset", help="dataset directory or manifest")
    p.add_argument("checkpoint", help="checkpoint path; '{M}' is replaced by the context size")
    p.add_argument("out", help="output CSV")
    p.add_argument("--m-list", type=_m_list, default=[1, 10, 50],
                   help="comma-separated context sizes")
    p.add_argument("--repeats", type=_positive(int), default=1,
                   help="timed runs per context size (median is reported)")
    _add_pipeline_flags(p, beta=True)
    p.set_defaults(func=cmd_sweep_context)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CommandError, OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mcpseg {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
