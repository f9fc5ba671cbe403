"""
Command-line entry point.

    python cli.py gen-data --config run.json --out data/
    python cli.py train --config run.json --out results/ [--rounds R] [--seed N] [--data data/]
    python cli.py eval --checkpoint results/student.ckpt --data data/
    python cli.py grad-check [--trials 20]
    python cli.py report --runs results/ --format markdown
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import pandas as pd

from benchmark import generate_benchmark
from checkpoint import load_checkpoint, model_checkpoint, model_from_checkpoint, save_checkpoint
from config import ExperimentConfig, load_config, save_config
from database import RunHistoryDB
from dataset import MANIFEST_NAME, load_dataset
from evaluation import Evaluator
from numerics import RngState, gradient_suite
from pipeline import run_experiment
from utils import (
    ArgumentError, CheckpointFormatError, ConfigurationError, DatasetError, TrainingError,
    ensure_directory_exists, get_env_variable, get_logger,
)

logger = get_logger("ddb")

GRADIENT_TOLERANCE = 1e-6
REPORT_COLUMNS = ["run_name", "seed", "round", "model", "domain", "miou"]


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    plan = config.plan
    if getattr(args, "rounds", None) is not None:
        plan = replace(plan, rounds=args.rounds)
    if getattr(args, "seed", None) is not None:
        plan = replace(plan, seed=args.seed)
    return replace(config, plan=plan)


def _data_rng(config: ExperimentConfig) -> RngState:
    return RngState(config.plan.seed).child("data")


def cmd_gen_data(args) -> int:
    config = _load(args)
    manifest = generate_benchmark(config.domains, args.out, _data_rng(config), config.arch.input_size)
    print(f"✅ Dataset written: {manifest}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    ensure_directory_exists(args.out)
    data_dir = args.data or str(Path(args.out) / "data")
    if not (Path(data_dir) / MANIFEST_NAME).exists():
        print(f"🖼️ No dataset at {data_dir}, generating one...")
        generate_benchmark(config.domains, data_dir, _data_rng(config), config.arch.input_size)
    save_config(config, str(Path(args.out) / "config.json"))
    result = run_experiment(config, load_dataset(data_dir), output_dir=args.out)
    save_checkpoint(
        str(Path(args.out) / "student.ckpt"),
        model_checkpoint(result.student, config.plan.seed, config.plan.rounds, "final", 0),
    )
    for report in result.reports:
        if "student" in report.summaries:
            print(f"📊 Round {report.round_index}: student mIoU {100 * report.miou('student'):.2f}")
    print(f"✅ Training finished, outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    data = load_dataset(args.data)
    if not data.eval_sets:
        raise ArgumentError(f"Dataset {args.data} has no labelled eval split")
    evaluator = Evaluator(model.num_classes, data.class_names, args.batch_size)
    summary = evaluator.evaluate_domains(model, data.eval_sets)
    print(evaluator.get_summary(summary))
    if args.json:
        evaluator.save_summary(summary, args.json)
    return 0


def cmd_grad_check(args) -> int:
    errors = gradient_suite(trials=args.trials, seed=args.seed)
    worst = 0.0
    for op, err in errors.items():
        mark = "✅" if err < GRADIENT_TOLERANCE else "❌"
        print(f"{mark} {op:<24} max rel. error {err:.3e}")
        worst = max(worst, err)
    return 0 if worst < GRADIENT_TOLERANCE else 1


def collect_history(runs_dir: str) -> pd.DataFrame:
    """Concatenate every run_history.db found below ``runs_dir``."""
    frames = [RunHistoryDB(str(path)).get_all_results_df() for path in sorted(Path(runs_dir).rglob("run_history.db"))]
    if not frames:
        raise DatasetError(f"No run_history.db found under {runs_dir}")
    return pd.concat(frames, ignore_index=True)[REPORT_COLUMNS]


def to_markdown(df: pd.DataFrame) -> str:
    def cell(value) -> str:
        if isinstance(value, float):
            return "n/a" if pd.isna(value) else f"{value:.4f}"
        return str(value)

    lines = ["| " + " | ".join(df.columns) + " |", "|" + "---|" * len(df.columns)]
    for row in df.itertuples(index=False):
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines)


def cmd_report(args) -> int:
    df = collect_history(args.runs)
    if args.format == "csv":
        sys.stdout.write(df.to_csv(index=False, lineterminator="\n"))
    else:
        print(to_markdown(df))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddb", description="Deliberated domain bridging on a synthetic benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = get_env_variable("DDB_OUTPUT_DIR", "results")

    gen = sub.add_parser("gen-data", help="render the synthetic benchmark")
    gen.add_argument("--config", default=None)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="run all DDB rounds")
    train.add_argument("--config", default=None)
    train.add_argument("--out", default=default_out)
    train.add_argument("--data", default=None, help="dataset directory (generated under --out if missing)")
    train.add_argument("--rounds", type=int, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on the labelled eval splits")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--batch-size", type=int, default=16)
    ev.add_argument("--json", default=None, help="also write the report to this JSON file")
    ev.set_defaults(func=cmd_eval)

    grad = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    grad.add_argument("--trials", type=int, default=20)
    grad.add_argument("--seed", type=int, default=0)
    grad.set_defaults(func=cmd_grad_check)

    rep = sub.add_parser("report", help="tabulate evaluation history")
    rep.add_argument("--runs", default=default_out)
    rep.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArgumentError, ConfigurationError, TrainingError, CheckpointFormatError, DatasetError) as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
