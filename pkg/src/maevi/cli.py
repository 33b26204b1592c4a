"""Command-line entry point: ``maevi {gen,voxelize,filter,interp,train,eval}``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines), trailing
``key=value`` overrides that win over the file, ``--seed`` and ``--out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys

import numpy as np

from . import config, events, sim, voxel
from . import motion_filter as mf
from .model import MAEVINet, ModelConfig, prepare
from .train import (TrainConfig, TrainingError, evaluate, load_checkpoint, predict, save_checkpoint, score,
                    train)

log = logging.getLogger("maevi")


class CliError(Exception):
    pass


def max_workers():
    """Worker cap from ``MAEVI_THREADS`` (default: all cores)."""
    raw = os.environ.get("MAEVI_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"MAEVI_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"MAEVI_THREADS must be a positive integer, got {raw!r}")
    return n


def gather_pairs(args):
    pairs = config.read_pairs(args.config) if args.config else []
    return pairs + config.parse_overrides(args.overrides)


def split_pairs(pairs, *targets):
    """Route each ``(key, value, line)`` to the first dataclass declaring ``key``."""
    routed = [[] for _ in targets]
    names = [{f.name for f in dataclasses.fields(t)} for t in targets]
    for key, value, lineno in pairs:
        for bucket, known in zip(routed, names):
            if key in known:
                bucket.append((key, value, lineno))
                break
        else:
            raise config.ConfigError(f"unknown key {key!r}" + (f" (line {lineno})" if lineno else ""))
    return [config.apply_pairs(t, b) for t, b in zip(targets, routed)]


def dataset_dirs(path):
    """A single sample directory, or every sample directory below a dataset root."""
    if not os.path.isdir(path):
        raise CliError(f"not a directory: {path}")
    if os.path.exists(os.path.join(path, "events_0.txt")):
        return [path]
    dirs = [d for d in events.list_samples(path) if os.path.exists(os.path.join(d, "events_0.txt"))]
    if not dirs:
        raise CliError(f"no sample directories (with events_0.txt) under {path}")
    return dirs


def need_out(args):
    if not args.out:
        raise CliError(f"{args.command}: --out is required")
    return args.out


def fmt(v):
    return f"{v:.4f}" if math.isfinite(v) else str(v)


# ---------------------------------------------------------------- subcommands

def cmd_gen(args):
    out = need_out(args)
    pairs = gather_pairs(args)
    spec = sim.scene_from_pairs(pairs, source=args.config or "overrides")
    workers = min(max_workers(), args.n)
    paths = sim.make_dataset(spec, args.n, out, seed=args.seed, workers=workers)
    print(f"wrote {len(paths)} samples to {out}")


def cmd_voxelize(args):
    out = need_out(args)
    (cfg,) = split_pairs(gather_pairs(args), ModelConfig())
    grid = voxel.voxelize_sample(events.load_sample(args.sample), cfg.n_time_bins)
    voxel.dump_grid(out, grid.data)
    print(f"wrote {grid.data.shape} voxel grid to {out}")


def cmd_filter(args):
    out = need_out(args)
    (cfg,) = split_pairs(gather_pairs(args), ModelConfig())
    sample = events.load_sample(args.sample)
    grid = voxel.voxelize_sample(sample, cfg.n_time_bins)
    filt = mf.region_filter(grid.data, cfg.sigmas)
    os.makedirs(out, exist_ok=True)
    for idx, w in zip(events.FRAME_INDICES, filt.weights):
        events.write_image(os.path.join(out, f"filter_{idx}.png"), w)
    for idx, f in zip(events.FRAME_INDICES, mf.apply_filter(sample.frames, filt.weights)):
        events.write_image(os.path.join(out, f"filtered_{idx}.png"), f)
    events.write_image(os.path.join(out, "loss_filter.png"), mf.loss_filter(filt))
    print(f"wrote region filters to {out}")


def cmd_interp(args):
    out = need_out(args)
    model = load_checkpoint(args.checkpoint).model
    os.makedirs(out, exist_ok=True)
    for d in dataset_dirs(args.sample):
        res, _ = predict(model, events.load_sample(d))
        name = os.path.basename(os.path.normpath(d))
        target = out if os.path.samefile(d, args.sample) else os.path.join(out, name)
        os.makedirs(target, exist_ok=True)
        events.write_image(os.path.join(target, "frame_0.png"), res.final.data)
        if args.branches:
            events.write_image(os.path.join(target, "standard.png"), np.clip(res.standard.fused.data, 0, 1))
            events.write_image(os.path.join(target, "filtered.png"), np.clip(res.filtered.fused.data, 0, 1))
    print(f"wrote interpolated frames to {out}")


def cmd_train(args):
    out = need_out(args)
    tcfg, mcfg = split_pairs(gather_pairs(args), TrainConfig(), ModelConfig())
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    samples = [events.load_sample(d) for d in dataset_dirs(args.dataset)]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(config.to_text(tcfg) + config.to_text(mcfg))

    def report(rec, model):
        if rec.step == 1 or rec.step % args.log_every == 0:
            log.info("step %d epoch %d lr %.3g loss %.6f", rec.step, rec.epoch, rec.lr, rec.loss)
        return True

    res = train(samples, tcfg, mcfg, out_dir=out, callback=report)
    print(f"trained {len(res.history)} steps; final loss {res.losses[-1]:.6f}; checkpoint {res.checkpoints[-1]}")


def eval_rows(source, dirs, mcfg):
    """Rows for a checkpoint file, or for a directory of already-predicted frames."""
    samples = [events.load_sample(d) for d in dirs]
    if not os.path.isdir(source):
        return evaluate(load_checkpoint(source).model, samples)
    rows = []
    for d, sample in zip(dirs, samples):
        if sample.ground_truth is None:
            raise CliError(f"{d}: no ground-truth frame_0.png to score against")
        path = os.path.join(source, sample.name, "frame_0.png")
        if not os.path.exists(path):
            path = os.path.join(source, "frame_0.png")
        if not os.path.exists(path):
            raise CliError(f"no prediction for {sample.name} under {source}")
        inp = prepare(sample, mcfg)
        rows.append(score(sample.name, events.read_image(path), inp.ground_truth, inp.loss_filter))
    return rows


def cmd_eval(args):
    (mcfg,) = split_pairs(gather_pairs(args), ModelConfig())
    rows = eval_rows(args.checkpoint, dataset_dirs(args.dataset), mcfg)
    lines = ["sample\tpsnr\tssim\tmasked_psnr"]
    for r in rows:
        lines.append(f"{r.name}\t{fmt(r.psnr)}\t{fmt(r.ssim)}\t{fmt(r.masked_psnr)}")
    masked = [r.masked_psnr for r in rows if not math.isnan(r.masked_psnr)]
    lines.append("mean\t" + "\t".join(fmt(v) for v in (
        float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])),
        float(np.mean(masked)) if masked else float("nan"))))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)


def cmd_init(args):
    """Write a freshly initialised checkpoint (useful for ``interp`` smoke runs)."""
    out = need_out(args)
    (mcfg,) = split_pairs(gather_pairs(args), ModelConfig())
    model = MAEVINet(mcfg, seed=args.seed or 0)
    if args.tie_branches:
        model.filtered.load_state_dict(model.standard.state_dict())
    save_checkpoint(out, model)
    print(f"wrote {model.num_parameters()}-parameter checkpoint to {out}")


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text 'key = value' config file")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="maevi", description="Event-assisted video frame interpolation.",
                                epilog="Trailing key=value items override --config values.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=1, help="number of samples")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("voxelize", parents=[common], help="dump a sample's voxel grid")
    s.add_argument("sample")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("filter", parents=[common], help="write a sample's moving-region filters")
    s.add_argument("sample")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("interp", parents=[common], help="interpolate middle frames")
    s.add_argument("checkpoint")
    s.add_argument("sample", help="sample directory or dataset root")
    s.add_argument("--branches", action="store_true", help="also write both branch outputs")
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("dataset")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="PSNR / SSIM / masked PSNR table")
    s.add_argument("checkpoint", help="checkpoint file, or a directory of predicted frame_0.png files")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("init", parents=[common], help="write an untrained checkpoint")
    s.add_argument("--tie-branches", action="store_true", help="copy standard branch weights to the filtered one")
    s.set_defaults(func=cmd_init)
    return p


def main(argv=None):
    parser = build_parser()
    # key=value overrides may appear anywhere after the subcommand
    args, extra = parser.parse_known_args(argv)
    bad = [e for e in extra if e.startswith("-") or "=" not in e]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is None and args.command == "gen":
        args.seed = 0
    try:
        args.func(args)
    except (CliError, config.ConfigError, events.FormatError, TrainingError,
            FileNotFoundError, NotADirectoryError, ValueError) as exc:
        print(f"maevi {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
