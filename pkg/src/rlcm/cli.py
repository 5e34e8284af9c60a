"""Command-line entry point.

    rlcm pretrain --config cfg.json --arm rlcm
    rlcm finetune --config cfg.json --arm ddpo --seed 1
    rlcm ablate-horizon --task target2d --horizons 2 4 8
    rlcm eval-time-budget --config cfg.json
    rlcm plot runs/finetune/*.csv --out figures

Set RLCM_THREADS to change the BLAS thread count (default 1, the reproducible mode).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import experiments
from .config import ConfigError, ExperimentConfig, load_config
from .rewards import TASK_DATASET


def resolve_config(args) -> ExperimentConfig:
    data = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    if args.task is not None:
        data["task"] = args.task
        data["dataset"] = TASK_DATASET[args.task]
    if args.arm is not None:
        data["arm"] = args.arm
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.out is not None:
        data["out_dir"] = args.out
    if args.horizon is not None:
        data["grid"]["H"] = args.horizon
    return ExperimentConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--arm", choices=["rlcm", "ddpo"])
    common.add_argument("--task", choices=sorted(TASK_DATASET))
    common.add_argument("--horizon", type=int, help="consistency sampler horizon H")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rlcm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the base model")
    sub.add_parser("finetune", parents=[common], help="RL fine-tuning against the task reward")
    p = sub.add_parser("ablate-horizon", parents=[common], help="fine-tune and evaluate across horizons")
    p.add_argument("--horizons", type=int, nargs="+")
    p = sub.add_parser("eval-time-budget", parents=[common], help="reward under inference time budgets")
    p.add_argument("--budgets", type=float, nargs="+", help="total CPU-second budgets")
    p = sub.add_parser("plot", parents=[common], help="SVG figures from metrics files")
    p.add_argument("files", nargs="+")
    return parser


def run(args) -> None:
    if args.command == "plot":
        for path in experiments.cmd_plot(args.files, args.out or "figures"):
            print(path)
        return
    cfg = resolve_config(args)
    if args.command == "pretrain":
        print(experiments.cmd_pretrain(cfg))
    elif args.command == "finetune":
        for path in experiments.cmd_finetune(cfg):
            print(path)
    elif args.command == "ablate-horizon":
        print(experiments.cmd_ablate_horizon(cfg, args.horizons))
    elif args.command == "eval-time-budget":
        print(experiments.cmd_eval_time_budget(cfg, args.budgets))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = int(os.environ.get("RLCM_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            run(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"rlcm: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
