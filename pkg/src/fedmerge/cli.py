"""Command-line surface: run, compare, gen-data, check.

Exit codes: 0 success, 2 configuration problems, 3 data problems.
Log verbosity comes from FEDMERGE_LOG in {error, info, debug}.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .conditions import CONDITIONS
from .datasets import Dataset, generate_synthetic, write_idx
from .errors import (
    BadMagic,
    ConfigInvalid,
    CountMismatch,
    DataLoadFailure,
    InfeasiblePartition,
    IoFailure,
    TruncatedFile,
)
from .harness import MNIST_FILES, ExperimentConfig, compare, write_run
from .merging import MergeConfig

log = logging.getLogger("fedmerge")

_DATA_ERRORS = (
    DataLoadFailure,
    BadMagic,
    TruncatedFile,
    CountMismatch,
    InfeasiblePartition,
    IoFailure,
)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    raw = os.environ.get("FEDMERGE_LOG", "error").lower()
    level = _LOG_LEVELS.get(raw)
    if level is None:
        level = logging.ERROR
        print(f"warning: FEDMERGE_LOG={raw!r} not in {sorted(_LOG_LEVELS)}", file=sys.stderr)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmerge",
        description="Deterministic federated-learning simulator with correlation-based node merging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True, help="JSON config file")
    p_run.add_argument("--seed", type=int, help="override: run only this seed")
    p_run.add_argument("--rounds", type=int, help="override: number of rounds")
    p_run.add_argument("--condition", choices=CONDITIONS, help="override: adverse condition")
    p_run.add_argument("--out", help="override: output directory")

    p_cmp = sub.add_parser("compare", help="baseline vs merged variant across conditions")
    p_cmp.add_argument("--config", required=True, help="JSON config file")
    p_cmp.add_argument(
        "--conditions", default="normal,packet_loss,poisoning", help="comma-separated conditions"
    )
    p_cmp.add_argument("--seeds", default=None, help="comma-separated seeds (default: config's)")
    p_cmp.add_argument("--out", help="directory for summary.csv / summary.txt")

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset in IDX format")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--n", type=int, default=4000, help="training samples")
    p_gen.add_argument("--n-test", type=int, default=None, help="test samples (default n // 5)")
    p_gen.add_argument("--classes", type=int, default=10, help="number of classes")
    p_gen.add_argument("--dim", type=int, default=64, help="input dimension")
    p_gen.add_argument("--noise", type=float, default=0.07, help="within-class spread")
    p_gen.add_argument("--seed", type=int, default=0, help="generation seed")

    sub.add_parser("check", help="run built-in sanity checks")
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    if args.rounds is not None:
        config = replace(config, rounds=args.rounds)
    if args.condition is not None:
        config = replace(config, adversity=replace(config.adversity, condition=args.condition))
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    rows, run_dir = write_run(config)
    last = max(r.round for r in rows)
    print(f"run written to {run_dir}")
    for row in rows:
        if row.round == last:
            print(
                f"seed {row.seed}: final accuracy {row.test_accuracy:.4f}, "
                f"loss {row.test_loss:.4f}, {row.n_active_nodes} active node(s)"
            )
    return 0


def _cmd_compare(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    conditions = [c for c in args.conditions.split(",") if c]
    bad = [c for c in conditions if c not in CONDITIONS]
    if bad:
        raise ConfigInvalid(f"unknown condition(s): {bad}")
    seeds = _parse_int_list(args.seeds) if args.seeds else list(config.seeds)
    baseline = replace(config, merge=None)
    proposed = config if config.merge is not None else replace(config, merge=MergeConfig())
    _, text = compare(baseline, proposed, conditions, seeds, out_dir=args.out)
    print(text, end="")
    return 0


def _cmd_gen_data(args) -> int:
    if args.n < 1 or args.classes < 2 or args.dim < 1:
        raise ConfigInvalid("gen-data needs n >= 1, classes >= 2, dim >= 1")
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 5)
    pool = generate_synthetic(
        args.n + n_test, args.dim, args.classes, seed=[args.seed, 0], noise=args.noise
    )
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    splits = {
        "train": Dataset(pool.inputs[: args.n], pool.labels[: args.n], args.classes),
        "test": Dataset(pool.inputs[args.n :], pool.labels[args.n :], args.classes),
    }
    for split, dataset in splits.items():
        images, labels = MNIST_FILES[split]
        write_idx(dataset, out / images, out / labels)
        print(f"wrote {out / images} ({dataset.inputs.shape[0]} samples)")
    return 0


def _cmd_check(_args) -> int:
    from .checks import run_all

    failures = 0
    for name, ok, detail in run_all():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "compare": _cmd_compare,
        "gen-data": _cmd_gen_data,
        "check": _cmd_check,
    }[args.command]
    try:
        return handler(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
