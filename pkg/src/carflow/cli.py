"""Command line: generate scenes, train, evaluate and run inference.

    carflow gen-data --out data/train --scenes 64 --pattern rigid --seed 0
    carflow train --data data/train --config run.cfg --out run.carf
    carflow eval --data data/test --checkpoint run.carf
    carflow infer --pc1 a.sfpc --pc2 b.sfpc --checkpoint run.carf --out flow.sfpc
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .binio import FormatError
from .evaluation import CameraIntrinsics, EmptyMaskError
from .network import CheckpointError, ConfigError, InsufficientPointsError
from .tensor import NonFiniteError
from .traindata import (PATTERNS, DataError, MissingGroundTruthError, ScenePair, SceneDataset, SceneRecipe,
                        generate_scene, read_scene, write_scene)
from .training import (ConfigParseError, Trainer, evaluate_dataset, load_training_checkpoint,
                       parse_run_config, predict_dataset, save_training_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("carflow")


class UsageError(Exception):
    pass


# -- gen-data -------------------------------------------------------------------

def scene_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def cmd_gen_data(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    entries = []
    for i in range(args.scenes):
        recipe = SceneRecipe(pattern=args.pattern, n_objects=args.objects, motion_scale=args.motion_scale,
                             noise=args.noise, n_points=args.points, seed=scene_seed(args.seed, i),
                             min_motion=args.min_motion, max_rotation_deg=args.max_rotation)
        name = f"scene_{i:05d}.sfpc"
        try:
            write_scene(generate_scene(recipe), out / name)
        except OSError as exc:
            raise DataError(f"cannot write {out / name}: {exc}") from None
        entries.append({"file": name, "recipe": dataclasses.asdict(recipe)})
    manifest = json.dumps({"scenes": entries}, indent=1, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(manifest, encoding="utf-8")
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _read_config(path, seed=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from None
    return parse_run_config(text, overrides={"seed": str(seed)} if seed is not None else None)


def cmd_train(args):
    cfg = _read_config(args.config, args.seed)
    dataset = SceneDataset(args.data, cfg.network.n_input)
    net = state = None
    if args.resume:
        net, saved, state = load_training_checkpoint(args.resume)
        if saved.network != cfg.network:
            raise ConfigParseError("network settings differ from the resumed checkpoint")
    trainer = Trainer(cfg, dataset, net=net, state=state)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    fresh = not (args.resume and log_path.exists())
    with open(log_path, "w" if fresh else "a", encoding="utf-8") as fh:
        if fresh:
            fh.write("step,loss,lr\n")
        history = trainer.run(cfg.max_steps, log=fh, checkpoint_path=args.out)
    save_training_checkpoint(args.out, trainer.net, cfg, trainer.state)
    if history:
        print(f"step {trainer.step} loss {history[-1][1]:.6g} lr {history[-1][2]:.6g}")
    print(f"checkpoint {args.out}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def cmd_eval(args):
    net, cfg, _ = load_training_checkpoint(args.checkpoint)
    intr = CameraIntrinsics.parse(args.intrinsics) if args.intrinsics else None
    dataset = SceneDataset(args.data, cfg.network.n_input)
    acc = evaluate_dataset(net, dataset, seed=args.seed, intrinsics=intr, with_2d=not args.no_2d)
    report = acc.report()
    print(report.to_lines())
    print(report.to_record())
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for rec in acc.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.dump_flow:
        out = Path(args.dump_flow)
        out.mkdir(parents=True, exist_ok=True)
        for name, xyz, pred, gt, _ in predict_dataset(net, dataset, seed=args.seed):
            write_scene(ScenePair(xyz, xyz + pred, pred), out / name)
    return EXIT_OK


# -- infer ------------------------------------------------------------------------

def load_points(path):
    """Read an (N, 3) cloud from an SFPC file (its first frame), ``.npy`` or whitespace text."""
    path = Path(path)
    try:
        if path.suffix == ".sfpc":
            return read_scene(path).pc1.astype(np.float64)
        if path.suffix == ".npy":
            pts = np.load(path)
        else:
            pts = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read points from {path}: {exc}") from None
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or not np.isfinite(pts).all():
        raise DataError(f"{path} does not hold finite N x 3 points")
    return pts


def cmd_infer(args):
    net, cfg, _ = load_training_checkpoint(args.checkpoint)
    pc1, pc2 = load_points(args.pc1), load_points(args.pc2)
    flows, st = net.forward(pc1, pc2, seed=[args.seed, 0],
                            dtype=np.float32 if args.float32 else np.float64)
    xyz = st.coords1[1][0]
    flow = flows[-1].data[0].astype(np.float64)
    write_scene(ScenePair(xyz, xyz + flow, flow), args.out)
    print(f"wrote {len(xyz)} flow vectors to {args.out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="numeric library threads (1 is bitwise reproducible)")
    common.add_argument("--seed", type=int, default=None, help="random seed (train: overrides the config seed)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="carflow", description="Context-aware residual scene flow on point clouds")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic scene pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=16)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--pattern", choices=PATTERNS, default="rigid")
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--motion-scale", type=float, default=0.3)
    g.add_argument("--min-motion", type=float, default=0.0)
    g.add_argument("--max-rotation", type=float, default=10.0, help="degrees")
    g.add_argument("--noise", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train from a config file")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--log", help="loss CSV (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a scene directory")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--intrinsics", help="fx,fy,cx,cy")
    e.add_argument("--no-2d", action="store_true")
    e.add_argument("--records", help="write per-scene JSON lines here")
    e.add_argument("--dump-flow", help="directory for predicted flows as SFPC files")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="predict flow for one pair of clouds")
    i.add_argument("--pc1", required=True)
    i.add_argument("--pc2", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--float32", action="store_true")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.command == "gen-data" and args.scenes < 0:
            raise UsageError("--scenes must be >= 0")
    except UsageError as exc:
        print(f"carflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is None and args.command != "train":
        args.seed = 0       # train falls back to the config seed
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigParseError, ConfigError, CheckpointError) as exc:
        print(f"carflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"carflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, MissingGroundTruthError, InsufficientPointsError, EmptyMaskError,
            ValueError, OSError) as exc:
        print(f"carflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
