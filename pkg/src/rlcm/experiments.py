"""Experiment commands: pretraining, fine-tuning, horizon ablation, time budgets, plots."""
from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_model, save_model
from .config import ExperimentConfig, save_config
from .consistency import ConsistencyModel, ct_pretrain
from .datasets import make_dataset
from .diffusion import ScoreModel, ddpo_finetune, diffusion_rollout, dsm_pretrain
from .metrics import METRICS_FIELDS, append_metrics, read_metrics, write_rows
from .plotting import plot_ablation, plot_files, plot_time_budget
from .rewards import QueryCounter, make_reward
from .rollout import karras_grid, rollout_batch, trajectory_rngs
from .trainer import train

log = logging.getLogger(__name__)

KIND = {"rlcm": "consistency", "ddpo": "diffusion"}


def _out(cfg: ExperimentConfig, *parts) -> Path:
    return Path(cfg.out_dir).joinpath(*parts)


def pretrain_path(cfg: ExperimentConfig, arm: str | None = None) -> Path:
    kind = KIND[arm or cfg.arm]
    return _out(cfg, "pretrain", f"{kind}_{cfg.dataset}_seed{cfg.pretrain_seed}.ckpt")


def finetune_stem(cfg: ExperimentConfig, seed: int, arm: str | None = None) -> Path:
    return _out(cfg, "finetune", f"{cfg.task}_{arm or cfg.arm}_seed{seed}")


def build_model(cfg: ExperimentConfig, dataset, rng: np.random.Generator, arm: str | None = None):
    m = cfg.model
    common = dict(hidden=tuple(m.hidden), embed_dim=m.embed_dim, T=cfg.grid.T, eps=cfg.grid.eps,
                  sigma_data=m.sigma_data, activation=m.activation, n_freq=m.n_freq)
    if (arm or cfg.arm) == "rlcm":
        return ConsistencyModel.create(dataset.dim, dataset.n_contexts, rng, **common)
    return ScoreModel.create(dataset.dim, dataset.n_contexts, rng, H_diff=m.H_diff, **common)


def generate(model, contexts, rngs, horizon: int = 8, rho: float = 7.0):
    """Sample trajectories with the model's own sampler (multistep consistency or ancestral)."""
    if model.kind == "consistency":
        return rollout_batch(model, karras_grid(horizon, model.eps, model.T, rho), contexts, rngs)
    return diffusion_rollout(model, contexts, rngs)


def evaluate_reward(model, reward, n: int, eval_seed: int, horizon: int = 8, rho: float = 7.0,
                    chunk: int = 250) -> float:
    """Mean reward over ``n`` samples drawn from fixed per-sample noise streams."""
    ctx = np.arange(n) % model.n_contexts
    total = 0.0
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        batch = generate(model, ctx[start:stop], trajectory_rngs(eval_seed, 0, start, stop - start),
                         horizon, rho)
        total += float(np.sum([reward(x, c) for x, c in zip(batch.terminals, batch.contexts)]))
    return total / n


def _load_pretrained(cfg: ExperimentConfig, arm: str | None = None):
    path = pretrain_path(cfg, arm)
    if not path.exists():
        raise FileNotFoundError(
            f"pretrained checkpoint {path} not found; run `rlcm pretrain --arm {arm or cfg.arm}` first")
    return load_model(path)


# --------------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """Train the base consistency (rlcm) or diffusion (ddpo) model and write its checkpoint."""
    save_config(_out(cfg, "pretrain", f"config_{cfg.arm}.json"), cfg)
    dataset = make_dataset(cfg.dataset)
    rng = np.random.default_rng(cfg.pretrain_seed)
    model = build_model(cfg, dataset, rng)
    t0 = time.process_time()
    if cfg.arm == "rlcm":
        model, history = ct_pretrain(model, dataset, cfg.ct, rng)
    else:
        model, history = dsm_pretrain(model, dataset, cfg.dsm, rng)
    log.info("pretrained %s on %s in %.1fs", model.kind, cfg.dataset, time.process_time() - t0)
    path = save_model(pretrain_path(cfg), model)
    write_rows(path.with_suffix(".loss.csv"), ["iteration", "loss"],
               [{"iteration": it, "loss": loss} for it, loss in history.logged])
    return path


def cmd_finetune(cfg: ExperimentConfig) -> list[Path]:
    """Fine-tune the pretrained model once per seed; returns the metrics files."""
    dataset = make_dataset(cfg.dataset)
    save_config(_out(cfg, "finetune", f"config_{cfg.task}_{cfg.arm}.json"), cfg)
    out = []
    for seed in cfg.seeds:
        model = _load_pretrained(cfg)
        reward = QueryCounter(make_reward(cfg.task, dataset, cfg.reward.scorer_seed, cfg.reward.quant_step))
        tcfg = cfg.train_config(seed)
        stem = finetune_stem(cfg, seed)
        metrics_path = stem.with_suffix(".csv")
        ckpt_path = stem.with_suffix(".ckpt")
        metrics_path.unlink(missing_ok=True)

        def on_epoch(epoch, m, row):
            append_metrics(metrics_path, row)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == tcfg.epochs:
                save_model(ckpt_path, m)
            log.info("%s seed %d epoch %d reward %.4f queries %d", cfg.arm, seed, epoch,
                     row.reward_mean, row.reward_queries)

        finetuner = train if cfg.arm == "rlcm" else ddpo_finetune
        result = finetuner(model, reward, range(dataset.n_contexts), tcfg,
                           np.random.default_rng(seed), on_epoch=on_epoch)
        if tcfg.epochs == 0:
            save_model(ckpt_path, model)
            write_rows(metrics_path, METRICS_FIELDS, [])
        if result.history and result.history[-1].reward_queries != reward.count:
            raise RuntimeError("metrics reward-query column disagrees with the query counter")
        out.append(metrics_path)
    return out


def cmd_ablate_horizon(cfg: ExperimentConfig, horizons: Sequence[int] | None = None) -> Path:
    """Fine-tune and evaluate RLCM at each horizon; writes ablation.csv and ablation.svg."""
    horizons = list(horizons or cfg.eval.horizons)
    dataset = make_dataset(cfg.dataset)
    out_dir = _out(cfg, "ablation")
    save_config(out_dir / "config.json", cfg)
    rows = []
    for H in horizons:
        for seed in cfg.seeds:
            model = _load_pretrained(cfg, "rlcm")
            reward = make_reward(cfg.task, dataset, cfg.reward.scorer_seed, cfg.reward.quant_step)
            before = evaluate_reward(model, reward, cfg.eval.n_samples, cfg.eval.eval_seed, H, cfg.grid.rho)
            counter = QueryCounter(reward)
            tcfg = cfg.train_config(seed, horizon=H, epochs=cfg.eval.ablation_epochs)
            metrics_path = out_dir / f"{cfg.task}_rlcm_H{H}_seed{seed}.csv"
            metrics_path.unlink(missing_ok=True)
            train(model, counter, range(dataset.n_contexts), tcfg, np.random.default_rng(seed),
                  on_epoch=lambda e, m, row: append_metrics(metrics_path, row))
            after = evaluate_reward(model, reward, cfg.eval.n_samples, cfg.eval.eval_seed, H, cfg.grid.rho)
            secs = per_trajectory_seconds(model, cfg.eval.trajectories, cfg.eval.eval_seed, H, cfg.grid.rho)
            rows.append({"task": cfg.task, "H": H, "seed": seed, "pretrained_reward": before,
                         "final_reward": after, "inference_s": float(np.mean(secs))})
            log.info("H=%d seed %d reward %.4f -> %.4f, %.2e s/sample", H, seed, before, after, rows[-1]["inference_s"])
    path = write_rows(out_dir / "ablation.csv",
                      ["task", "H", "seed", "pretrained_reward", "final_reward", "inference_s"], rows)
    plot_ablation(rows, out_dir)
    return path


def per_trajectory_seconds(model, n: int, eval_seed: int, horizon: int = 8, rho: float = 7.0) -> np.ndarray:
    """CPU seconds to generate each of ``n`` trajectories one at a time."""
    secs = np.empty(n)
    for i in range(n):
        rngs = trajectory_rngs(eval_seed, 0, i, 1)
        t0 = time.process_time()
        generate(model, [i % model.n_contexts], rngs, horizon, rho)
        secs[i] = time.process_time() - t0
    return secs


def trajectory_log(model, reward, n: int, eval_seed: int, horizon: int = 8, rho: float = 7.0) -> list[dict]:
    """Generate ``n`` trajectories sequentially, recording CPU seconds and reward of each."""
    rows = []
    for i in range(n):
        c = i % model.n_contexts
        rngs = trajectory_rngs(eval_seed, 0, i, 1)
        t0 = time.process_time()
        batch = generate(model, [c], rngs, horizon, rho)
        secs = time.process_time() - t0
        rows.append({"index": i, "seconds": secs, "reward": reward(batch.terminals[0], c)})
    return rows


def budget_curve(seconds: Sequence[float], rewards: Sequence[float], budgets: Sequence[float],
                 cap: int = 100) -> list[tuple[int, float]]:
    """(completed, mean reward) per total budget, running trajectories in order until it runs out.

    A budget that does not fit a single trajectory yields (0, nan): a missing point.
    """
    done = np.cumsum(np.asarray(seconds, dtype=np.float64)[:cap])
    rewards = np.asarray(rewards, dtype=np.float64)[:cap]
    out = []
    for b in budgets:
        n = int(np.searchsorted(done, b, side="right"))
        out.append((n, float(np.mean(rewards[:n])) if n else float("nan")))
    return out


def cmd_eval_time_budget(cfg: ExperimentConfig, budgets: Sequence[float] | None = None) -> Path:
    """Mean reward of completed trajectories versus total CPU budget, for both arms."""
    dataset = make_dataset(cfg.dataset)
    reward = make_reward(cfg.task, dataset, cfg.reward.scorer_seed, cfg.reward.quant_step)
    out_dir = _out(cfg, "time_budget")
    save_config(out_dir / "config.json", cfg)
    n = cfg.eval.trajectories
    logs = {}
    for arm in ("rlcm", "ddpo"):
        for seed in cfg.seeds:
            ckpt = finetune_stem(cfg, seed, arm).with_suffix(".ckpt")
            if not ckpt.exists():
                raise FileNotFoundError(f"fine-tuned checkpoint {ckpt} not found; run `rlcm finetune --arm {arm}`")
            model = load_model(ckpt)
            rows = trajectory_log(model, reward, n, cfg.eval.eval_seed, cfg.grid.H, cfg.grid.rho)
            write_rows(out_dir / f"trajectories_{arm}_seed{seed}.csv", ["index", "seconds", "reward"], rows)
            logs[arm, seed] = rows
    budgets = list(budgets or cfg.eval.budgets or default_budgets(logs.values()))
    out_rows = []
    for (arm, seed), rows in logs.items():
        curve = budget_curve([r["seconds"] for r in rows], [r["reward"] for r in rows], budgets, n)
        for b, (done, mean) in zip(budgets, curve):
            out_rows.append({"arm": arm, "seed": seed, "budget_s": b, "n_completed": done, "mean_reward": mean})
    path = write_rows(out_dir / "time_budget.csv", ["arm", "seed", "budget_s", "n_completed", "mean_reward"],
                      out_rows)
    plot_time_budget(out_rows, out_dir)
    return path


def default_budgets(logs, n_points: int = 16) -> list[float]:
    secs = [r["seconds"] for rows in logs for r in rows]
    totals = [sum(r["seconds"] for r in rows) for rows in logs]
    lo, hi = 0.5 * min(secs), 1.05 * max(totals)
    return [float(b) for b in np.geomspace(max(lo, 1e-6), hi, n_points)]


def cmd_plot(paths: Sequence, out_dir) -> list[Path]:
    return plot_files(paths, out_dir)


def load_history(path) -> list[dict]:
    return read_metrics(path)

