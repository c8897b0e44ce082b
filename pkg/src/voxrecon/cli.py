"""Command-line entry point: ``voxrecon <subcommand> ...``.

Exit codes: 0 success, 1 input error, 2 numerical failure, 3 reconstruction failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from . import metrics as M
from .train import (
    Checkpoint,
    DivergenceError,
    InputError,
    ReconstructionFailure,
    RunConfig,
    generate_dataset,
    load_dataset,
    reconstruct_points,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("voxrecon")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_RECON = 0, 1, 2, 3


def _config(args):
    cfg = RunConfig()
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise InputError(f"config file {args.config} not found")
        cfg = RunConfig.from_text(p.read_text(encoding="utf-8"), cfg)
    if args.seed is not None:
        cfg = RunConfig.from_text(f"seed={args.seed}", cfg)
    return cfg


def cmd_gen_data(args):
    cfg = _config(args)
    rows = generate_dataset(args.out, cfg)
    log.info("wrote %d samples to %s", len(rows), args.out)


def cmd_train_stage1(args):
    cfg = _config(args)
    train, val = load_dataset(args.data, cfg.l_vox)
    ckpt, _ = train_stage1(cfg, train, val)
    ckpt.save(args.out)


def cmd_train_stage2(args):
    ckpt = Checkpoint.load(args.ckpt)
    cfg = ckpt.config
    if args.config or args.seed is not None:
        cfg = _config(args)
    train, val = load_dataset(args.data, cfg.l_vox)
    new, _ = train_stage2(cfg, train, val, ckpt)
    new.save(args.out)


def cmd_reconstruct(args):
    ckpt = Checkpoint.load(args.ckpt)
    if not (ckpt.stage1 and ckpt.stage2):
        raise InputError("checkpoint must have both stages trained")
    try:
        pts = D.read_ply(args.input)
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from None
    out, summary = reconstruct_points(ckpt, pts)
    D.write_ply(args.out, out)
    print(f"input points {summary['n_in']}  output voxels {summary['n_vout']}  output points {summary['n_out']}")


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x)


def cmd_evaluate(args):
    try:
        pred, gt = D.read_ply(args.pred), D.read_ply(args.gt)
        rep = M.evaluate(pred, gt, args.thresholds, args.ks)
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from None
    text = rep.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def build_parser():
    ap = argparse.ArgumentParser(prog="voxrecon", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="plain-text key=value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_help is not None, help=out_help)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, "output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train the voxel generator")
    common(p, "checkpoint to write")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train relocalization on a frozen stage 1")
    common(p, "checkpoint to write")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("reconstruct", help="run the full pipeline on a PLY file")
    common(p, "output PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="compare two point clouds")
    common(p, None)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds", type=_floats, default=M.DEFAULT_THRESHOLDS)
    p.add_argument("--ks", type=_ints, default=M.DEFAULT_KS)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ReconstructionFailure as e:
        print(str(e), file=sys.stderr)
        return EXIT_RECON
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
