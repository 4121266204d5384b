"""Command-line surface.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
SPARSEARCH_THREADS caps math-library thread pools (set before numpy loads);
--deterministic forces single-threaded math and fixed data order.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _apply_thread_env(deterministic):
    threads = os.environ.get("SPARSEARCH_THREADS")
    if deterministic:
        threads = "1"
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsearch",
        description="Architecture search by sparse optimization of edge scaling factors.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default=None, help="override output directory")
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded math, fixed data order")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="stage 1: train the full network")
    sub.add_parser("search", parents=[common], help="stage 2: joint weight/factor search")
    fin = sub.add_parser("finalize", parents=[common], help="fit width multiplier to budget")
    fin.add_argument("--target-flops", type=int, default=None)
    sub.add_parser("retrain", parents=[common], help="stage 3: retrain the found architecture")
    sub.add_parser("eval", parents=[common], help="score the retrained checkpoint")
    exp = sub.add_parser("export-dot", parents=[common], help="write DOT graphs")
    exp.add_argument("--descriptor", default=None, help="descriptor path override")
    sub.add_parser("costs", parents=[common], help="dump the cost-model table as CSV")
    sub.add_parser("run-all", parents=[common], help="chain all stages")
    return parser


def _load_config(args):
    from dataclasses import replace

    from .config import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.precision is not None:
        cfg = replace(cfg, precision=args.precision)
    if args.deterministic:
        cfg = replace(cfg, deterministic=True)
    return cfg


def cli_main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError
    from .data import FormatError
    try:
        cfg = _load_config(args)
    except (ConfigError, FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    _apply_thread_env(cfg.deterministic)
    from . import budget, runner
    from .optim import DivergenceError
    try:
        if args.command == "pretrain":
            runner.run_pretrain(cfg)
            print(f"pretrain checkpoint written to {runner.RunPaths(cfg.out_dir).pretrain_ckpt}")
        elif args.command == "search":
            _, result, desc = runner.run_search(cfg)
            print(f"search finished ({result.stop_reason}) after {result.epochs_run} "
                  f"epochs; {result.active_edges} surviving edges")
            print(f"descriptor written to {runner.RunPaths(cfg.out_dir).descriptor}")
        elif args.command == "finalize":
            if args.target_flops is not None:
                from dataclasses import replace
                cfg = replace(cfg, target_flops=args.target_flops)
            desc = runner.run_finalize(cfg)
            print(f"stage widths {desc.stage_widths}, "
                  f"{budget.descriptor_flops(desc)} FLOPs")
        elif args.command == "retrain":
            _, accuracy, _ = runner.run_retrain(cfg)
            print(f"test accuracy {accuracy:.4f}")
        elif args.command == "eval":
            accuracy, _ = runner.run_eval(cfg)
            print(f"test accuracy {accuracy:.4f}")
        elif args.command == "export-dot":
            path = args.descriptor or runner.RunPaths(cfg.out_dir).descriptor
            desc = runner.load_descriptor(path)
            runner.write_dot_files(desc, runner.RunPaths(cfg.out_dir).dot_dir)
            print(f"DOT graphs written to {runner.RunPaths(cfg.out_dir).dot_dir}")
        elif args.command == "costs":
            import csv
            writer = csv.writer(sys.stdout)
            writer.writerow(["kind", "c_in", "c_out", "h", "w", "flops", "mac"])
            writer.writerows(budget.cost_table(cfg.network))
        elif args.command == "run-all":
            result = runner.run_all(cfg)
            print(f"search: {result.active_edges} surviving edges "
                  f"({result.stop_reason}); retrained test accuracy "
                  f"{result.test_accuracy:.4f}")
            print(f"artifacts in {cfg.out_dir}")
        else:  # unreachable with required=True
            parser.print_usage(sys.stderr)
            return 2
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
