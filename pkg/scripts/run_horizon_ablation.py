"""Final reward and inference time of RLCM fine-tuned at several horizons.

    python scripts/run_horizon_ablation.py --horizons 2 4 8 --out runs/ablation
"""
import argparse
import logging

from threadpoolctl import threadpool_limits

from rlcm.config import EvalConfig, ExperimentConfig
from rlcm.experiments import cmd_ablate_horizon, cmd_pretrain, pretrain_path
from rlcm.metrics import read_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--task", default="target2d")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--horizons", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(task=args.task, seeds=args.seeds, out_dir=args.out,
                           eval=EvalConfig(ablation_epochs=args.epochs, horizons=args.horizons))
    if not pretrain_path(cfg).exists():
        cmd_pretrain(cfg)
    path = cmd_ablate_horizon(cfg)
    for row in read_rows(path)[1]:
        print(f"H={row['H']} seed={row['seed']} reward {row['pretrained_reward']:.4f} -> "
              f"{row['final_reward']:.4f}  {row['inference_s']:.2e} s/sample")


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        main()
