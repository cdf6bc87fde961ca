"""Command-line entry points: ``train``, ``verify``, ``eval`` and ``compare``.

Exit codes are 0 on success, 1 on a runtime failure, 2 on a usage or config
error and 3 on a corrupt checkpoint.  ``train`` writes into ``--out-dir``,
falling back to ``$LFPO_OUT_DIR`` and then ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import verify as verify_mod
from .checkpoint import read_checkpoint, write_checkpoint
from .config import TrainConfig, load_config
from .envs import TaskKind, evaluate
from .errors import CheckpointError, ConfigError, InvalidInputError, TrainingDivergedError
from .trainer import MetricsRow, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CORRUPT = 0, 1, 2, 3
OUT_DIR_ENV = "LFPO_OUT_DIR"

ALGORITHMS = {"lfpo": "lfpo", "pg-baseline": "pg_baseline"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _metrics_line(row: MetricsRow) -> str:
    return json.dumps(row.to_dict(), sort_keys=True, allow_nan=False) + "\n"


def _load(path, seed):
    config = load_config(path)
    if seed is not None:
        config = config.replace(trainer__seed=seed)
    return config


def run_training(config: TrainConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    every = config.trainer.checkpoint_every

    def save(state):
        if every and state.iteration % every == 0 and state.iteration < config.trainer.total_iterations:
            name = f"checkpoint_{state.iteration:06d}.lfpo"
        else:
            name = "final.lfpo"
        write_checkpoint(out_dir / name, config, state.theta, state.opt_state)

    with open(metrics_path, "w", encoding="utf-8") as fh:
        def emit(row):
            fh.write(_metrics_line(row))
            fh.flush()

        try:
            train(config, on_row=emit, on_checkpoint=save)
        except TrainingDivergedError as exc:
            state = exc.state
            write_checkpoint(out_dir / "diagnostic.lfpo", config, state.theta, state.opt_state)
            print(f"error: {exc}; diagnostic checkpoint written to {out_dir / 'diagnostic.lfpo'}",
                  file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args.config, args.seed)
    out_dir = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")
    return run_training(config, out_dir)


def cmd_verify(args) -> int:
    results = verify_mod.run_all(seed=args.seed, fault=args.fault)
    print(verify_mod.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print("\nfailed checks:", file=sys.stderr)
        for r in failed:
            print(f"  {r.name}: observed {r.observed:.3e} (tolerance {r.tolerance:.1e})", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.n_prompts < 1:
        print("error: --n-prompts must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        config, params, _ = read_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    task = config.task
    if args.task is not None:
        try:
            task = config.replace(task__kind=TaskKind(args.task)).task
        except (ValueError, InvalidInputError) as exc:
            print(f"error: task '{args.task}' is incompatible with the checkpoint: {exc}", file=sys.stderr)
            return EXIT_USAGE
    reward, steps = evaluate(task, params, config.model_config, config.decode, args.n_prompts,
                             np.random.default_rng(args.seed), return_steps=True)
    summary = {
        "eval_exact_reward": reward,
        "mean_decode_steps": steps,
        "n_prompts": args.n_prompts,
        "seed": args.seed,
        "task": task.kind.value,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def first_reaching(rows, target: float):
    """Iteration of the first evaluated row whose exact reward is at least ``target``."""
    for row in rows:
        if row.eval_exact_reward is not None and row.eval_exact_reward >= target:
            return row.iteration
    return None


def run_compare(config: TrainConfig, algos, seeds, out_path: Path, target: float):
    """Train every (seed, algorithm) pair and write all rows to one JSONL file."""
    out_path.parent.mkdir(parents=True, exist_ok=True)
    reached = {}
    with open(out_path, "w", encoding="utf-8") as fh:
        for seed in seeds:
            for algo in algos:
                cfg = config.replace(trainer__seed=seed, trainer__algorithm=ALGORITHMS[algo])
                rows = train(cfg, on_row=lambda row: fh.write(_metrics_line(row))).metrics
                reached[(algo, seed)] = first_reaching(rows, target)
    return reached


def cmd_compare(args) -> int:
    config = _load(args.config, None)
    seeds = args.seeds if args.seeds else [config.trainer.seed]
    out = Path(args.out or Path(os.environ.get(OUT_DIR_ENV) or "runs") / "compare.jsonl")
    reached = run_compare(config, args.algos, seeds, out, args.target)
    for (algo, seed), it in reached.items():
        shown = "not reached" if it is None else f"iteration {it}"
        print(f"{algo:<12} seed {seed:<4} target {args.target:g}: {shown}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log evaluation rows")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides trainer.seed")
    p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the numerical property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", choices=["ce_sign"], default=None,
                   help="inject a known defect to exercise the failure path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", default=None, choices=[k.value for k in TaskKind],
                   help="task kind (default: the checkpoint's)")
    p.add_argument("--n-prompts", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train LFPO and the PG baseline on shared seeds")
    p.add_argument("config")
    p.add_argument("--algos", nargs="+", choices=list(ALGORITHMS), default=["lfpo", "pg-baseline"])
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--target", type=float, default=0.5, help="eval reward to report first-reach for")
    p.add_argument("--out", default=None, help="merged JSONL path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
