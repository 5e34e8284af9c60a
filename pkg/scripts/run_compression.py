"""Compressibility and incompressibility fine-tuning on the 8x8 pattern dataset.

Prints the mean proxy file size of generated samples before and after fine-tuning.

    python scripts/run_compression.py --out runs/compression
"""
import argparse
import logging

from threadpoolctl import threadpool_limits

from rlcm.checkpoint import load_model
from rlcm.config import ExperimentConfig, RLConfig
from rlcm.datasets import Patterns8
from rlcm.experiments import cmd_finetune, cmd_plot, cmd_pretrain, evaluate_reward, finetune_stem, pretrain_path
from rlcm.rewards import make_reward


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/compression")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    size = make_reward("incompress", Patterns8())
    metrics = []
    for task in ("compress", "incompress"):
        cfg = ExperimentConfig(task=task, seeds=args.seeds, out_dir=args.out, train=RLConfig(epochs=args.epochs))
        if not pretrain_path(cfg).exists():
            cmd_pretrain(cfg)
        metrics += cmd_finetune(cfg)
        n, seed = cfg.eval.n_samples, cfg.eval.eval_seed
        base = evaluate_reward(load_model(pretrain_path(cfg)), size, n, seed)
        print(f"{task}: pretrained {base:.3f} bytes")
        for s in args.seeds:
            tuned = load_model(finetune_stem(cfg, s).with_suffix(".ckpt"))
            print(f"{task}: seed {s} {evaluate_reward(tuned, size, n, seed):.3f} bytes")
    for path in cmd_plot(metrics, f"{args.out}/figures"):
        print(path)


if __name__ == "__main__":
    with threadpool_limits(limits=1):
        main()
