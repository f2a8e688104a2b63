"""``mapnet`` command line: demo-data, train, track, eval, gradcheck, plot.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import DATA_ROOT_ENV, RunConfig, parse_config, write_config
from .errors import ConfigurationError, ContractError, DataError, NumericError, UndefinedLossError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ECHO = "config.resolved.yaml"

log = logging.getLogger("mapnet")


def _cmd_demo_data(args) -> int:
    from .data import generate_dataset, write_dataset
    from .training import synthetic_config

    cfg = parse_config(args.config).replace(**{"data.length": args.length, "data.sequences": args.sequences,
                                                "data.seed": args.seed})
    sequences = generate_dataset(args.sequences, args.seed, synthetic_config(cfg))
    write_dataset(args.out, sequences)
    write_config(cfg, Path(args.out) / CONFIG_ECHO)
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .training import train

    cfg = parse_config(args.config)
    if args.iterations is not None and args.iterations < 1:
        raise ConfigurationError("--iterations: must be >= 1")
    out = Path(args.out)
    write_config(cfg, out / CONFIG_ECHO)
    result = train(cfg, out_dir=out, iterations=args.iterations)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} steps, final loss {last.get('loss', float('nan')):.6f}; "
          f"checkpoint at {result.checkpoint}")
    return EXIT_OK


def _load_tracker(checkpoint):
    from .checkpoint import load_checkpoint
    from .tracker import SiameseTracker

    model, cfg, _ = load_checkpoint(checkpoint)
    return SiameseTracker(model, cfg), cfg


def _cmd_track(args) -> int:
    from .data import read_sequence
    from .tracker import format_results

    tracker, cfg = _load_tracker(args.checkpoint)
    frames, gt = read_sequence(args.sequence)
    boxes, scores = tracker.track(frames, gt[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.sequence).resolve().name
    (out / f"{name}.txt").write_text(format_results(boxes, scores))
    write_config(cfg, out / CONFIG_ECHO)
    print(f"tracked {len(frames)} frames of {name} -> {out / (name + '.txt')}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluation import run_ope

    dataset = args.dataset or os.environ.get(DATA_ROOT_ENV)
    if not dataset:
        raise ConfigurationError(f"--dataset: not given and {DATA_ROOT_ENV} is unset")
    tracker, cfg = _load_tracker(args.checkpoint)
    report = run_ope(tracker, dataset, args.out)
    write_config(cfg, Path(args.out) / CONFIG_ECHO)
    o = report.overall
    print(f"{len(report.sequences)} sequences, {o.frames} frames: SR {o.success:.4f} PR {o.precision:.4f} "
          f"NPR {o.norm_precision:.4f} AO {o.ao:.4f} SR50 {o.sr50:.4f} SR75 {o.sr75:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import BLOCKS, TOLERANCE, run_gradcheck

    blocks = args.block or list(BLOCKS)
    unknown = [b for b in blocks if b not in BLOCKS]
    if unknown:
        raise ConfigurationError(f"--block: unknown block(s) {unknown}; choose from {sorted(BLOCKS)}")
    results = run_gradcheck(blocks, seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:24s} rel_err={err:.3e} {status}")
        worst = max(worst, err)
    if worst >= TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE:g}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .evaluation import EvalReport, emit_plots

    path = Path(args.report)
    if not path.exists():
        raise DataError(f"{path}: report not found")
    try:
        report = EvalReport.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid report ({exc})") from exc
    for p in emit_plots(report, args.out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapnet", description="Multi-attention Siamese tracker.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("demo-data", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=5)
    p.add_argument("--length", type=int, default=60)
    p.add_argument("--config", default=None, help="config whose data.frame_size is used")
    p.set_defaults(func=_cmd_demo_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None, help="override epochs x iterations_per_epoch")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="track one sequence directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="one-pass evaluation over a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help=f"defaults to ${DATA_ROOT_ENV}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--block", action="append", default=None, help="repeatable; default all blocks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("plot", help="render curves from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, UndefinedLossError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
