"""``dmtl`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import harness
from .harness import DataError, load_data
from .autodiff.ops import ConfigError
from .autodiff.tensor import ShapeError
from .config import _dims, load_config
from .data import generate_dataset, load_samples, read_manifest, split_patients
from .data.formats import FormatError
from .data.split import SplitSpec
from .model import CheckpointError, load_checkpoint
from .train import NumericError, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("dmtl")


def cmd_gen_data(args) -> int:
    if args.n < 3:
        raise ConfigError(f"--n must be at least 3 so every split is non-empty, got {args.n}")
    try:
        dims = _dims(args.dims)
        manifest = generate_dataset(args.out, args.n, dims, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {len(manifest)} patients to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out.dir={args.out}")
    cfg = load_config(args.config, overrides)
    if not Path(cfg.data_root).exists():
        raise DataError(f"dataset root {cfg.data_root} does not exist")
    splits = harness.load_splits(cfg.data_root, cfg.split_seed)
    if args.no_eval:
        train(cfg, cfg.out_dir, samples=splits[:2])
    else:
        evals = harness.train_and_evaluate(cfg, cfg.out_dir, splits)
        print(f"val dice {evals['val'].mean_dice:.4f}  test dice {evals['test'].mean_dice:.4f}")
    print(f"outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    patch = _dims(args.patch)
    harness.check_compatible(model, patch)
    manifest = load_data(read_manifest, args.manifest)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split_patients(manifest, SplitSpec(seed=args.split_seed))))
        manifest = parts[args.split]
    samples = load_data(load_samples, manifest)
    ev = evaluate(model, samples, patch, None if args.stride is None else _dims(args.stride), args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_metrics({args.split: ev}, out)
    acc = "" if ev.accuracy is None else f"  accuracy {ev.accuracy:.4f}"
    print(f"{len(samples)} patients  mean dice {ev.mean_dice:.4f}{acc}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .suite import run_suite
    t0 = time.perf_counter()
    results = run_suite(args.scale, args.tol, args.max_elements)
    failed = 0
    for r in results:
        print(f"{r.name:32s} {r.report}  ({r.seconds:.1f}s)")
        failed += not r.report.passed
    print(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if not Path(cfg.data_root).exists():
        raise DataError(f"dataset root {cfg.data_root} does not exist")
    report = harness.compare(cfg, args.runs, args.out, args.workers)
    print((Path(args.out) / "report.md").read_text(), end="")
    return EXIT_OK if report.runs == args.runs else EXIT_DATA


def cmd_report(args) -> int:
    out = Path(args.dir)
    if not out.is_dir():
        raise DataError(f"{out} is not a directory")
    harness.build_report(out)
    print((out / "report.md").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmtl", description="Multi-task U-Net segmentation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic phantom corpus")
    g.add_argument("--n", type=int, default=311)
    g.add_argument("--dims", default="48x48x40")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data/desk")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from a config file plus key=value overrides")
    t.add_argument("--config", default=None)
    t.add_argument("--out", default=None, help="shorthand for out.dir=...")
    t.add_argument("--no-eval", action="store_true", help="skip the final val/test evaluation")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True, help="dataset root or manifest.csv")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split-seed", type=int, default=1)
    e.add_argument("--patch", default="32x32x32")
    e.add_argument("--stride", default=None)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", default="metrics.csv")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="float64 finite-difference check of every op and the model")
    c.add_argument("--scale", choices=("tiny",), default="tiny")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-elements", type=int, default=None,
                   help="check at most N elements per parameter of the end-to-end model (default: all)")
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="single- vs multi-task study over split seeds 1..R")
    m.add_argument("--runs", type=int, default=6)
    m.add_argument("--config", default=None)
    m.add_argument("--out", default="runs/compare")
    m.add_argument("--workers", type=int, default=1, help="sub-runs trained in parallel processes")
    m.add_argument("overrides", nargs="*", metavar="key=value")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="rebuild report.csv/report.md from a compare directory")
    r.add_argument("--dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except harness.RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc.cause)
    except Exception as exc:
        code = _code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


def _code(exc: BaseException) -> int | None:
    if isinstance(exc, (ConfigError, ShapeError)):
        return EXIT_CONFIG
    if isinstance(exc, (FormatError, DataError, CheckpointError)):
        return EXIT_DATA
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


if __name__ == "__main__":
    sys.exit(main())
