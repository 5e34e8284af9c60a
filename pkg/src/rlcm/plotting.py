"""Deterministic SVG figures built only from metrics files."""
from __future__ import annotations

import re
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRICS_FIELDS, MetricsParseError, read_rows  # noqa: E402

plt.rcParams["svg.hashsalt"] = "rlcm"
plt.rcParams["svg.fonttype"] = "none"

_SEED_SUFFIX = re.compile(r"_seed\d+$")


def seed_band(ys_by_seed: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std across seeds at each x (NaNs ignored)."""
    ys = np.asarray(ys_by_seed, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns stay NaN
        return np.nanmean(ys, axis=0), np.nanstd(ys, axis=0)


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _band_plot(ax, x, ys, label):
    mean, std = seed_band(ys)
    ax.plot(x, mean, label=label)
    ax.fill_between(x, mean - std, mean + std, alpha=0.25)


def plot_learning_curves(groups: dict[str, list[list[dict]]], out_dir: Path) -> list[Path]:
    paths = []
    for xkey, fname, xlabel in (("reward_queries", "reward_vs_queries.svg", "reward queries"),
                                ("wall_clock_s", "reward_vs_wallclock.svg", "CPU seconds")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, runs in sorted(groups.items()):
            n = min(len(r) for r in runs)
            x = np.mean([[row[xkey] for row in r[:n]] for r in runs], axis=0)
            _band_plot(ax, x, [[row["reward_mean"] for row in r[:n]] for r in runs], label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("mean reward")
        ax.legend()
        paths.append(_save(fig, out_dir / fname))
    return paths


def plot_time_budget(rows: list[dict], out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    by_arm: dict[str, dict[int, list[dict]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        by_arm[row["arm"]][row["seed"]].append(row)
    for arm, seeds in sorted(by_arm.items()):
        runs = [sorted(r, key=lambda row: row["budget_s"]) for _, r in sorted(seeds.items())]
        x = [row["budget_s"] for row in runs[0]]
        _band_plot(ax, x, [[row["mean_reward"] for row in r] for r in runs], arm)
    ax.set_xscale("log")
    ax.set_xlabel("time budget (CPU s)")
    ax.set_ylabel("mean reward of completed trajectories")
    ax.legend()
    return _save(fig, out_dir / "time_budget.svg")


def plot_ablation(rows: list[dict], out_dir: Path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    horizons = sorted({row["H"] for row in rows})
    seeds = sorted({row["seed"] for row in rows})
    lookup = {(row["H"], row["seed"]): row for row in rows}
    for ax, key, ylabel in ((left, "final_reward", "final mean reward"),
                            (right, "inference_s", "inference seconds / sample")):
        mean, std = seed_band([[lookup[(h, s)][key] for h in horizons] for s in seeds])
        ax.errorbar(horizons, mean, yerr=std, marker="o", capsize=3)
        ax.set_xlabel("horizon H")
        ax.set_ylabel(ylabel)
        ax.set_xticks(horizons)
    fig.tight_layout()
    return _save(fig, out_dir / "ablation.svg")


def plot_files(paths: Sequence, out_dir) -> list[Path]:
    """Route each metrics file to its figure by header; raise on empty input."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves: dict[str, list[list[dict]]] = defaultdict(list)
    budget_rows, ablation_rows = [], []
    for p in sorted(Path(p) for p in paths):
        header, rows = read_rows(p)
        if not rows:
            raise MetricsParseError(f"{p}: line 2: no data rows")
        if set(METRICS_FIELDS) <= set(header):
            curves[_SEED_SUFFIX.sub("", p.stem)].append(rows)
        elif {"arm", "budget_s", "mean_reward"} <= set(header):
            budget_rows.extend(rows)
        elif {"H", "final_reward", "inference_s"} <= set(header):
            ablation_rows.extend(rows)
        else:
            raise MetricsParseError(f"{p}: line 1: unrecognised header {header}")
    out = []
    if curves:
        out += plot_learning_curves(curves, out_dir)
    if budget_rows:
        out.append(plot_time_budget(budget_rows, out_dir))
    if ablation_rows:
        out.append(plot_ablation(ablation_rows, out_dir))
    if not out:
        raise MetricsParseError("no metrics files given")
    return out
