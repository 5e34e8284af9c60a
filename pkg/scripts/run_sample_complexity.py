"""Reward vs reward queries and vs CPU time for RLCM and DDPO on one task.

    python scripts/run_sample_complexity.py --task target2d --out runs/sample_complexity
"""
import argparse
import logging

from threadpoolctl import threadpool_limits

from rlcm.config import ExperimentConfig, RLConfig
from rlcm.experiments import cmd_finetune, cmd_plot, cmd_pretrain, pretrain_path


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--task", default="target2d")
    ap.add_argument("--out", default="runs/sample_complexity")
    ap.add_argument("--epochs", type=int, default=125)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    metrics = []
    for arm in ("rlcm", "ddpo"):
        cfg = ExperimentConfig(task=args.task, arm=arm, seeds=args.seeds, out_dir=args.out,
                               train=RLConfig(epochs=args.epochs))
        if not pretrain_path(cfg).exists():
            cmd_pretrain(cfg)
        metrics += cmd_finetune(cfg)
    for path in cmd_plot(metrics, f"{args.out}/figures"):
        print(path)


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        main()
