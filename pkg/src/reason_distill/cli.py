"""Command-line entry point: ``reason-distill <subcommand> [options]``."""

from __future__ import annotations

import os
import sys

if "--single-thread" in sys.argv:
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"

import argparse
import json
from pathlib import Path

from .autodiff import NonFiniteError
from .checks import run_grad_checks, selftest_cases
from .config import ConfigError, ExperimentConfig, parse_seed_range
from .distill import METHODS, DivergenceError
from .experiments import (
    RunReport,
    comparison_csv,
    comparison_text,
    make_datasets,
    run_distill,
    run_distill_methods,
    run_grpo,
    write_datasets,
    write_run,
)
from .grpo_train import REWARD_MODES, CheckpointMissing
from .synth import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ABLATION_METHODS = ("crsd_full", "crsd_no_reason", "crsd_random_reason")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.paper_defaults:
        cfg = cfg.paper_defaults()
    exp = {}
    if args.seed is not None:
        exp["seeds"] = (args.seed,)
    if args.seeds is not None:
        exp["seeds"] = parse_seed_range(args.seeds)
    if args.workers is not None:
        exp["workers"] = args.workers
    if args.single_thread:
        exp["workers"] = 1
    if exp:
        cfg = cfg.with_overrides("experiment", **exp)
    if getattr(args, "method", None):
        cfg = cfg.with_overrides("distill", method=args.method)
    if getattr(args, "reward_mode", None):
        cfg = cfg.with_overrides("grpo", reward_mode=args.reward_mode)
    return cfg


def _data_dir(args) -> str | None:
    if args.data is None:
        return None
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"dataset directory {args.data} does not exist")
    return str(args.data)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    write_datasets(make_datasets(cfg), out)
    (out / "config.resolved.json").write_text(cfg.to_json())
    print(f"wrote datasets to {out}")
    return EXIT_OK


def cmd_train_distill(args) -> int:
    cfg = _config(args)
    run = run_distill(cfg, cfg.distill.method, _data_dir(args))
    write_run(run, cfg, Path(args.out))
    print(comparison_text([run.report]), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = _data_dir(args)
    reports = []
    for method, run in run_distill_methods(cfg, ABLATION_METHODS, data).items():
        write_run(run, cfg, out / method)
        reports.append(run.report)
    digests = {r.method: [row["data_digest"] for row in r.per_seed] for r in reports}
    if len({tuple(v) for v in digests.values()}) != 1:
        raise DataError("ablation rows were trained on different (query, service, label) triples")
    (out / "comparison.csv").write_text(comparison_csv(reports))
    (out / "comparison.txt").write_text(comparison_text(reports))
    print(comparison_text(reports), end="")
    return EXIT_OK


def cmd_train_grpo(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if args.sft_dir:
        run = run_grpo(cfg, Path(args.sft_dir), _data_dir(args), train_sft=False)
    else:
        run = run_grpo(cfg, out / "sft", _data_dir(args), train_sft=True)
    write_run(run, cfg, out)
    m = run.report.mean
    print(
        f"{run.report.method}: accuracy {m['accuracy']:.4f}  R_thinking {m['thinking']:.4f}  "
        f"group reward {m['group_reward_start']:.4f} -> {m['group_reward_end']:.4f}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        p = Path(p)
        if p.is_dir():
            p = p / "report.json"
        try:
            reports.append(RunReport.from_json(p.read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"{p}: {exc}") from exc
    kinds = {r.kind for r in reports}
    if len(kinds) > 1:
        raise DataError(f"incompatible report kinds {sorted(kinds)}")
    text = comparison_text(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(comparison_csv(reports))
        (out / "comparison.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _print_checks(results) -> int:
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_OK if not failed else EXIT_DIVERGED


def cmd_grad_check(args) -> int:
    results = run_grad_checks()
    worst = max(r.value for r in results)
    code = _print_checks(results)
    print(f"max relative error {worst:.3e}")
    return code


def cmd_selftest(args) -> int:
    return _print_checks(selftest_cases())


def build_parser() -> argparse.ArgumentParser:
    serial = argparse.ArgumentParser(add_help=False)
    serial.add_argument("--single-thread", action="store_true", help="serialize everything for bitwise reproducibility")
    common = argparse.ArgumentParser(add_help=False, parents=[serial])
    common.add_argument("--config", help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--seeds", help="seed range N..M (inclusive)")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--workers", type=int, help="parallel seed workers")
    common.add_argument("--paper-defaults", action="store_true", help="mu=0.1, gamma=delta=0.01, G=16")
    common.add_argument("--data", help="read datasets written by gen-data instead of generating them")

    p = argparse.ArgumentParser(prog="reason-distill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write world and datasets").set_defaults(fn=cmd_gen_data)
    t = sub.add_parser("train-distill", parents=[common], help="train students for one method")
    t.add_argument("--method", choices=METHODS)
    t.set_defaults(fn=cmd_train_distill)
    sub.add_parser("ablate", parents=[common], help="oracle / no / random reason comparison").set_defaults(fn=cmd_ablate)
    g = sub.add_parser("train-grpo", parents=[common], help="SFT warm start then GRPO")
    g.add_argument("--reward-mode", choices=REWARD_MODES)
    g.add_argument("--sft-dir", help="directory of existing sft_seed<N>.npz checkpoints")
    g.set_defaults(fn=cmd_train_grpo)
    r = sub.add_parser("report", parents=[serial], help="comparison table from run reports")
    r.add_argument("reports", nargs="+", help="report.json files or run directories")
    r.add_argument("--out", help="also write comparison.csv / comparison.txt here")
    r.set_defaults(fn=cmd_report)
    sub.add_parser("grad-check", parents=[serial], help="finite-difference gradient suite").set_defaults(fn=cmd_grad_check)
    sub.add_parser("selftest", parents=[serial], help="closed-form loss cases").set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointMissing, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
