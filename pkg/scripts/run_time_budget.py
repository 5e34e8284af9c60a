"""Mean reward of completed trajectories under total CPU budgets, RLCM vs DDPO.

Reuses the fine-tuned checkpoints written by run_sample_complexity.py (same --out).

    python scripts/run_time_budget.py --out runs/sample_complexity
"""
import argparse
import logging

import numpy as np
from threadpoolctl import threadpool_limits

from rlcm.config import ExperimentConfig
from rlcm.experiments import cmd_eval_time_budget
from rlcm.metrics import read_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--task", default="target2d")
    ap.add_argument("--out", default="runs/sample_complexity")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--budgets", type=float, nargs="+")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(task=args.task, seeds=args.seeds, out_dir=args.out)
    path = cmd_eval_time_budget(cfg, args.budgets)
    for arm in ("rlcm", "ddpo"):
        secs = [r["seconds"] for s in args.seeds
                for r in read_rows(path.parent / f"trajectories_{arm}_seed{s}.csv")[1]]
        print(f"{arm}: {np.mean(secs):.2e} CPU s per trajectory")
    print(path)


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        main()
