"""Multistep consistency sampling and its MDP rollout with Gaussian policy densities."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .consistency import ConsistencyModel, consistency_forward
from .nn import ContractError, Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TimeGrid:
    """Decreasing times T = points[0] > ... > points[H] = eps."""

    H: int
    points: np.ndarray
    rho: float

    @property
    def T(self) -> float:
        return float(self.points[0])

    @property
    def eps(self) -> float:
        return float(self.points[-1])

    def std(self, t: int) -> float:
        """Noise std of step t's action: sqrt(tau_{t+1}^2 - eps^2); zero on the last step."""
        return float(np.sqrt(self.points[t + 1] ** 2 - self.eps ** 2))

    def stds(self) -> np.ndarray:
        return np.array([self.std(t) for t in range(self.H)])


def karras_grid(H: int, eps: float, T: float, rho: float = 7.0) -> TimeGrid:
    if H < 1:
        raise ContractError(f"horizon must be >= 1, got {H}")
    if not 0 < eps < T:
        raise ContractError(f"need 0 < eps < T, got eps={eps}, T={T}")
    if rho <= 0:
        raise ContractError(f"rho must be positive, got {rho}")
    i = np.arange(H + 1) / H
    pts = (T ** (1 / rho) + i * (eps ** (1 / rho) - T ** (1 / rho))) ** rho
    pts[0], pts[-1] = T, eps
    if np.any(np.diff(pts) >= 0):
        raise ContractError("grid is not strictly decreasing; reduce H or widen [eps, T]")
    return TimeGrid(H=H, points=pts, rho=rho)


def _check_grid(model: ConsistencyModel, grid: TimeGrid) -> None:
    if grid.T != model.T or grid.eps != model.eps:
        raise ContractError(
            f"grid spans [{grid.eps}, {grid.T}] but the model expects [{model.eps}, {model.T}]")


def gaussian_logprob(mean, std: float, a) -> float | np.ndarray:
    """log N(a; mean, std^2 I), reduced over the last axis."""
    if std <= 0:
        raise ContractError(f"std must be positive, got {std}")
    mean, a = np.asarray(mean, dtype=np.float64), np.asarray(a, dtype=np.float64)
    if mean.shape != a.shape:
        raise nn.DimensionError(f"action shape {a.shape} != mean shape {mean.shape}")
    d = mean.shape[-1]
    out = -np.sum((a - mean) ** 2, axis=-1) / (2.0 * std * std) - d * (math.log(std) + HALF_LOG_2PI)
    return float(out) if np.ndim(out) == 0 else out


def _rowwise_logprob(mean: np.ndarray, std: np.ndarray, a: np.ndarray) -> np.ndarray:
    d = mean.shape[-1]
    return -np.sum((a - mean) ** 2, axis=-1) / (2.0 * std * std) - d * (np.log(std) + HALF_LOG_2PI)


def multistep_sample(model: ConsistencyModel, grid: TimeGrid, c: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Multistep consistency sampling for one context: denoise, renoise, denoise again."""
    _check_grid(model, grid)
    x_T = grid.T * rng.standard_normal(model.dim)
    x = consistency_forward(model, x_T[None], grid.T, c).data[0]
    for n in range(1, grid.H):
        z = rng.standard_normal(model.dim)
        tau = grid.points[n]
        x_hat = x + np.sqrt(tau ** 2 - grid.eps ** 2) * z
        x = consistency_forward(model, x_hat[None], tau, c).data[0]
    return x


@dataclass
class Trajectory:
    """One MDP episode; states[t+1] is actions[t] and the last action is the terminal sample."""

    context: int
    states: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    times: np.ndarray
    stds: np.ndarray
    reward: float = float("nan")
    advantage: float = float("nan")

    @property
    def terminal(self) -> np.ndarray:
        return self.actions[-1]


@dataclass
class RolloutBatch:
    """Batched trajectories; array axis 0 indexes trajectories.

    states  (B, H, d): x at tau_0..tau_{H-1} (the states the policy acts in)
    actions (B, H, d): a_t = x at tau_{t+1}; actions[:, -1] is the terminal sample
    logprobs (B, H-1): log pi(a_t | s_t) for the stochastic steps
    """

    contexts: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    grid: TimeGrid
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def terminals(self) -> np.ndarray:
        return self.actions[:, -1]

    @property
    def n_stochastic(self) -> int:
        return self.logprobs.shape[1]

    def trajectory(self, i: int) -> Trajectory:
        H = self.grid.H
        return Trajectory(
            context=int(self.contexts[i]),
            states=np.concatenate([self.states[i], self.actions[i, -1:]]),
            actions=self.actions[i].copy(),
            logprobs=self.logprobs[i].copy(),
            times=self.grid.points.copy(),
            stds=self.grid.stds()[: H - 1],
            reward=float("nan") if self.rewards is None else float(self.rewards[i]),
            advantage=float("nan") if self.advantages is None else float(self.advantages[i]),
        )

    def take(self, idx) -> "RolloutBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return type(self)(self.contexts[idx], self.states[idx], self.actions[idx],
                            self.logprobs[idx], self.grid, pick(self.rewards), pick(self.advantages))

    @staticmethod
    def concat(batches: Sequence["RolloutBatch"]) -> "RolloutBatch":
        cat = lambda name: (None if getattr(batches[0], name) is None  # noqa: E731
                            else np.concatenate([getattr(b, name) for b in batches]))
        return type(batches[0])(cat("contexts"), cat("states"), cat("actions"), cat("logprobs"),
                            batches[0].grid, cat("rewards"), cat("advantages"))


def rollout_batch(model: ConsistencyModel, grid: TimeGrid, contexts,
                  rngs: Sequence[np.random.Generator]) -> RolloutBatch:
    """Roll out one trajectory per (context, rng) pair, vectorised across the batch.

    Each trajectory draws its noise only from its own generator, in the same order as
    :func:`multistep_sample`, so results do not depend on how trajectories are batched.
    """
    _check_grid(model, grid)
    contexts = np.asarray(contexts, dtype=np.int64)
    B, d, H = len(contexts), model.dim, grid.H
    if len(rngs) != B:
        raise ContractError(f"{B} contexts but {len(rngs)} generators")
    x = grid.T * np.stack([r.standard_normal(d) for r in rngs])
    states = np.empty((B, H, d))
    actions = np.empty((B, H, d))
    logprobs = np.empty((B, H - 1))
    for t in range(H):
        states[:, t] = x
        mean = consistency_forward(model, x, grid.points[t], contexts).data
        if t < H - 1:
            std = np.sqrt(grid.points[t + 1] ** 2 - grid.eps ** 2)
            z = np.stack([r.standard_normal(d) for r in rngs])
            x = mean + std * z
            logprobs[:, t] = _rowwise_logprob(mean, std, x)
        else:
            x = mean
        actions[:, t] = x
    return RolloutBatch(contexts, states, actions, logprobs, grid)


def rollout(model: ConsistencyModel, grid: TimeGrid, c: int, rng: np.random.Generator) -> Trajectory:
    return rollout_batch(model, grid, [c], [rng]).trajectory(0)


def policy_logprob(model: ConsistencyModel, batch: RolloutBatch) -> Tensor:
    """log pi_theta(a_t | s_t) for every stochastic step, shape (B, H-1), on the active tape."""
    B, H, d = batch.states.shape
    S = H - 1
    if S == 0:
        return Tensor(np.zeros((B, 0)))
    states = batch.states[:, :S].reshape(B * S, d)
    actions = batch.actions[:, :S].reshape(B * S, d)
    times = np.tile(batch.grid.points[:S], B)
    stds = np.tile(batch.grid.stds()[:S], B)
    ctx = np.repeat(batch.contexts, S)
    mean = consistency_forward(model, states, times, ctx)
    sq = nn.sum(nn.square(nn.sub(actions, mean)), axis=1)
    logp = nn.sub(nn.mul(sq, -1.0 / (2.0 * stds * stds)), d * (np.log(stds) + HALF_LOG_2PI))
    return nn.reshape(logp, (B, S))


def replay_logprobs(model: ConsistencyModel, traj: Trajectory) -> np.ndarray:
    """Re-evaluate a stored trajectory's step log-probabilities under ``model``."""
    out = []
    for t in range(len(traj.logprobs)):
        mean = consistency_forward(model, traj.states[t][None], traj.times[t], traj.context).data[0]
        out.append(gaussian_logprob(mean, traj.stds[t], traj.actions[t]))
    return np.array(out)


def trajectory_rngs(seed: int, epoch: int, start: int, n: int) -> list[np.random.Generator]:
    """Independent generators keyed by (seed, epoch, trajectory index)."""
    return [np.random.default_rng([seed, epoch, start + i]) for i in range(n)]
