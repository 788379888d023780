"""Command-line front end: ``ufafuse <gen-data|train|fuse|eval|selfcheck> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 failed self-check.

A JSON file given with ``--config`` supplies defaults for the subcommand's
flags (keys spelled like the flags, with or without leading dashes);
flags on the command line win. ``UFAF_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import datasetgen, metrics, network, selfcheck
from . import tensor as T
from .checkpoint import CheckpointError, load_network
from .imageio import ImageFormatError, from_unit, read_image, to_unit, write_image
from .train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("ufafuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="ufafuse", description="Multi-focus image fusion toolkit.")
    p.add_argument("--config", type=Path, help="JSON file with default flag values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize near/far/gt training triplets")
    g.add_argument("--src", type=Path, help="directory of RGB source images")
    g.add_argument("--labels", type=Path, help="directory of grayscale labels with matching names")
    g.add_argument("--out", type=Path, help="output directory (receives manifest.tsv)")
    g.add_argument("--count", type=int, help="number of triplets (default: one per source)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--groups", default="0,1,2,3", help="comma-separated blur groups, assigned round-robin")

    t = sub.add_parser("train", help="train a fusion network on a manifest")
    t.add_argument("--manifest", type=Path)
    t.add_argument("--out-checkpoint", type=Path)
    t.add_argument("--lambda", type=float, default=0.2, help="weight of the L1 term")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--crop", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", default="UFA", choices=network.ABLATION_MODES)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--lr-decay-every", type=int, default=200, help="divide lr by 10 every N epochs")
    t.add_argument("--checkpoint-every", type=int, default=10, help="epochs between checkpoints")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--loss-csv", type=Path, help="loss curve path (default: checkpoint path + .csv)")
    t.add_argument("--resume", type=Path, help="training checkpoint to continue from")

    f = sub.add_parser("fuse", help="fuse two images with a trained checkpoint")
    f.add_argument("--checkpoint", type=Path)
    f.add_argument("--a", type=Path)
    f.add_argument("--b", type=Path)
    f.add_argument("--out", type=Path)
    f.add_argument("--dump-attention", type=Path, metavar="DIR",
                   help="write min-max normalized attention maps as PGM into DIR")

    e = sub.add_parser("eval", help="compute fusion metrics over a directory")
    e.add_argument("--fused-dir", type=Path)
    e.add_argument("--src-a-dir", type=Path)
    e.add_argument("--src-b-dir", type=Path)
    e.add_argument("--gt-dir", type=Path)
    e.add_argument("--out", type=Path, help="CSV report path")

    s = sub.add_parser("selfcheck", help="run gradient and invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20, help="random instances per op")
    s.add_argument("--network-instances", type=int, default=20)
    s.add_argument("--perturb-conv-backward", type=float, default=0.0, help=argparse.SUPPRESS)
    return p


REQUIRED = {
    "gen-data": ("src", "labels", "out"),
    "train": ("manifest", "out_checkpoint"),
    "fuse": ("checkpoint", "a", "b", "out"),
    "eval": ("fused_dir", "src_a_dir", "src_b_dir", "out"),
    "selfcheck": (),
}


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: gen-data, train, fuse, eval or selfcheck")
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions if a.dest != "help"}
        defaults = {}
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known:
                raise UsageError(f"config key {key!r} is not a flag of {args.command}")
            action = known[dest]
            defaults[dest] = action.type(value) if action.type is not None and value is not None else value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [d for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise UsageError(f"{args.command}: missing required {flags}")
    return args


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_gen_data(args):
    try:
        groups = [int(g) for g in str(args.groups).split(",") if g.strip()]
    except ValueError as exc:
        raise UsageError(f"--groups must be comma-separated integers: {args.groups}") from exc
    entries = datasetgen.generate(args.src, args.labels, args.out, groups=groups, seed=args.seed, count=args.count)
    print(f"wrote {len(entries)} triplets to {args.out} (manifest {Path(args.out) / 'manifest.tsv'})")
    return EXIT_OK


def cmd_train(args):
    lam = vars(args)["lambda"]
    try:
        cfg = TrainConfig(lam=lam, lr0=args.lr, lr_decay_every=args.lr_decay_every, epochs=args.epochs,
                          batch=args.batch, crop=args.crop, seed=args.seed,
                          checkpoint_every=args.checkpoint_every, max_steps=args.max_steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.resume is not None:
        net, _, _ = load_network(args.resume)
    else:
        net = network.FusionNetwork.initialize(args.seed, ablation=args.ablation)
    loss_csv = args.loss_csv or Path(str(args.out_checkpoint) + ".csv")
    result = train(net, args.manifest, cfg, checkpoint_path=args.out_checkpoint, loss_csv=loss_csv,
                   resume=args.resume)
    if not result.curve:
        print(f"nothing to do: the run already covers {result.epochs_done} of {cfg.epochs} epochs")
        return EXIT_OK
    last = result.curve[-1]
    print(f"trained {len(result.curve)} steps; final loss {last.total:.5f} "
          f"(l1 {last.l1:.5f}, ssim {last.ssim_loss:.5f}); checkpoint {args.out_checkpoint}; curve {loss_csv}")
    return EXIT_OK


def _normalize(arr):
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.full(arr.shape, 128, dtype=np.uint8), lo, hi
    return np.rint((arr - lo) / (hi - lo) * 255).astype(np.uint8), lo, hi


def write_attention(maps, directory):
    """Write each map as a min-max normalized PGM; a constant map becomes mid-gray.

    Channel maps (64 values) are laid out as an 8x8 tile, row-major by
    channel. Raw ranges go to ``attention.json`` so values can be recovered.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ranges = {}
    for kind, tensors in (("channel", maps.channel_maps), ("spatial", maps.spatial_maps)):
        for k, t in enumerate(tensors, 1):
            arr = t.data[0]
            arr = arr.reshape(8, -1) if kind == "channel" and arr.size == 64 else arr.reshape(arr.shape[-2:])
            img, lo, hi = _normalize(arr.astype(np.float64))
            name = f"{kind}_map_{k}.pgm"
            write_image(img, directory / name)
            ranges[name] = {"min": lo, "max": hi}
    (directory / "attention.json").write_text(json.dumps(ranges, indent=2) + "\n", encoding="utf-8")
    return sorted(ranges)


def cmd_fuse(args):
    net, _, _ = load_network(args.checkpoint)
    a = read_image(args.a, mode="rgb")
    b = read_image(args.b, mode="rgb")
    if a.shape != b.shape:
        raise ValueError(f"source images differ in size: {a.shape[:2]} vs {b.shape[:2]}")
    if min(a.shape[:2]) < 7:
        raise ValueError(f"images must be at least 7x7, got {a.shape[0]}x{a.shape[1]}")
    images = [T.Tensor(to_unit(a)), T.Tensor(to_unit(b))]
    maps = []
    fused = network._forward(images, net, maps)
    write_image(from_unit(fused.data), args.out)
    print(f"wrote {args.out} ({a.shape[1]}x{a.shape[0]})")
    if args.dump_attention is not None:
        names = write_attention(maps[0], args.dump_attention)
        if not names:
            log.warning("ablation mode %s computes no attention maps", net.ablation)
        print(f"wrote {len(names)} attention maps to {args.dump_attention}")
    return EXIT_OK


def cmd_eval(args):
    rows = metrics.evaluate_corpus(args.fused_dir, args.src_a_dir, args.src_b_dir, args.gt_dir, args.out)
    mean = rows[-1][1]
    ssim = "" if mean.ssim_to_gt is None else f" ssim_gt {mean.ssim_to_gt:.4f}"
    print(f"{len(rows) - 1} images; mean avg {mean.avg:.4f} std {mean.std:.4f} sen {mean.sen:.4f} "
          f"qabf {mean.q_abf:.4f}{ssim}; report {args.out}")
    return EXIT_OK


def cmd_selfcheck(args):
    previous = T.CONV_BACKWARD_PERTURBATION
    T.CONV_BACKWARD_PERTURBATION = args.perturb_conv_backward
    try:
        results = selfcheck.run(seed=args.seed, instances=args.instances, network_instances=args.network_instances,
                                log=lambda r: print(r.line(), flush=True))
    finally:
        T.CONV_BACKWARD_PERTURBATION = previous
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def _thread_limit():
    value = os.environ.get("UFAF_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise UsageError(f"UFAF_THREADS must be a positive integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ImageFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
