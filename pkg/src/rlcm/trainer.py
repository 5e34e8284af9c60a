"""Policy-gradient fine-tuning with per-context reward normalisation and clipped ratios."""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .nn import ContractError, NonFiniteError, Tensor
from .rollout import RolloutBatch, karras_grid, policy_logprob, rollout_batch, trajectory_rngs


@dataclass
class TrainConfig:
    """RL fine-tuning hyperparameters (defaults follow the compression column of Table 1)."""

    clip_range: float = 1e-4
    adv_clip_max: float = 10.0
    horizon: int = 8
    lr: float = 1e-4
    max_grad_norm: float = 5.0
    batches_per_epoch: int = 10
    sample_batch_size: int = 16
    train_batch_size: int = 8
    grad_accum_steps: int = 2
    inner_epochs: int = 1
    epochs: int = 100
    buffer_size: int = 16
    min_count: int = 16
    rho: float = 7.0
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "seed":
                continue
            if name == "epochs" and value == 0:
                continue
            if not value > 0:
                raise ContractError(f"TrainConfig.{name} must be positive, got {value}")
        if self.clip_range >= 1:
            raise ContractError("clip_range must be < 1")


@dataclass
class MetricsRow:
    epoch: int
    reward_queries: int
    wall_clock_s: float
    reward_mean: float
    reward_std: float
    surrogate_loss: float
    grad_norm: float
    clip_fraction: float
    model_calls_per_traj: float
    stochastic_steps: int
    seed: int


# --------------------------------------------------------------------------
# reward normalisation

class ContextStats:
    """Per-context FIFO buffers of recent raw rewards."""

    def __init__(self, capacity: int = 16, min_count: int = 16):
        self.capacity = capacity
        self.min_count = min_count
        self.buffers: dict[int, deque] = {}

    def buffer(self, c: int) -> deque:
        return self.buffers.setdefault(int(c), deque(maxlen=self.capacity))

    def push(self, c: int, r: float) -> None:
        self.buffer(c).append(float(r))

    def stats(self, c: int) -> tuple[float, float, int]:
        """(mean, population std, count) over the buffer of context ``c``."""
        buf = np.array(self.buffer(c), dtype=np.float64)
        if buf.size == 0:
            return 0.0, 1.0, 0
        return float(buf.mean()), float(buf.std()), buf.size

    def advantage(self, c: int, r: float, a_max: float) -> float:
        mean, std, count = self.stats(c)
        if count == 0:
            return 0.0
        scale = 1.0 if count < self.min_count else max(std, 1e-6)
        return float(np.clip((r - mean) / scale, -a_max, a_max))


def normalize_reward(stats: ContextStats, c: int, r: float, a_max: float) -> float:
    """Advantage of ``r`` against the context's buffered rewards, then push ``r``."""
    if not math.isfinite(r):
        raise ContractError(f"reward must be finite, got {r}")
    adv = stats.advantage(c, r, a_max)
    stats.push(c, r)
    return adv


def normalize_batch(stats: ContextStats, contexts, rewards, a_max: float) -> np.ndarray:
    """Push a batch of rewards, then normalise each against its context's updated buffer."""
    for c, r in zip(contexts, rewards):
        if not math.isfinite(r):
            raise ContractError(f"reward must be finite, got {r}")
        stats.push(c, r)
    return np.array([stats.advantage(c, r, a_max) for c, r in zip(contexts, rewards)])


# --------------------------------------------------------------------------
# clipped surrogate and the update

def clipped_surrogate(logp_new, logp_old, advantage, eps_clip: float):
    """Sum over steps of min(A * ratio, A * clip(ratio, 1 - eps, 1 + eps)).

    ``logp_new`` may be a Tensor (then the result is differentiable). For 1-D inputs a
    scalar is returned; for (B, S) inputs one value per trajectory.
    """
    old = np.asarray(logp_old, dtype=np.float64)
    new_data = logp_new.data if isinstance(logp_new, Tensor) else np.asarray(logp_new, dtype=np.float64)
    if new_data.shape != old.shape:
        raise nn.DimensionError(f"log-prob shapes differ: {new_data.shape} vs {old.shape}")
    ratio = nn.exp(nn.sub(logp_new, old))
    bad = ~np.isfinite(ratio.data)
    if bad.any():
        step = int(np.argwhere(bad)[0][-1])
        raise NonFiniteError(f"non-finite importance ratio at step {step}")
    adv = np.asarray(advantage, dtype=np.float64)
    if adv.ndim == 1 and old.ndim == 2:
        adv = adv[:, None]
    unclipped = nn.mul(ratio, adv)
    clipped = nn.mul(nn.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv)
    out = nn.sum(nn.minimum(unclipped, clipped), axis=-1)
    return out if isinstance(logp_new, Tensor) else (float(out.data) if out.data.ndim == 0 else out.data)


@dataclass
class UpdateStats:
    loss: float
    grad_norm: float
    clip_fraction: float
    max_abs_log_ratio: float


LogprobFn = Callable[[object, RolloutBatch], Tensor]


def policy_update(model, frozen, minibatches: Sequence[RolloutBatch], cfg: TrainConfig,
                  adam: nn.AdamState, logprob_fn: LogprobFn = policy_logprob) -> UpdateStats:
    """One optimiser step on the clipped surrogate, accumulated over ``minibatches``.

    Old log-probabilities are recomputed with the frozen rollout-time model on exactly the
    same minibatch, so with unchanged parameters every ratio is exactly 1.
    """
    params = model.params
    params.zero_grad()
    n_traj = sum(len(mb) for mb in minibatches)
    total, clipped, steps, max_lr = 0.0, 0, 0, 0.0
    for mb in minibatches:
        logp_old = logprob_fn(frozen, mb).data
        with nn.Tape() as tape:
            logp_new = logprob_fn(model, mb)
            obj = clipped_surrogate(logp_new, logp_old, mb.advantages, cfg.clip_range)
            loss = nn.mul(nn.sum(obj), -1.0 / n_traj)
        nn.backward(tape, loss)
        total += loss.item()
        log_ratio = logp_new.data - logp_old
        clipped += int(np.sum(np.abs(np.exp(log_ratio) - 1.0) > cfg.clip_range))
        steps += log_ratio.size
        if log_ratio.size:
            max_lr = max(max_lr, float(np.max(np.abs(log_ratio))))
    grad_norm = params.grad_norm()
    nn.clip_grad_norm(params, cfg.max_grad_norm)
    nn.adam_step(params, adam, cfg.lr)
    return UpdateStats(total, grad_norm, clipped / steps if steps else 0.0, max_lr)


def rlcm_update(model, frozen, minibatch, cfg: TrainConfig, adam: nn.AdamState) -> UpdateStats:
    batches = [minibatch] if isinstance(minibatch, RolloutBatch) else list(minibatch)
    return policy_update(model, frozen, batches, cfg, adam, policy_logprob)


# --------------------------------------------------------------------------
# training loop

RolloutFn = Callable[[object, np.ndarray, list], RolloutBatch]


@dataclass
class FinetuneResult:
    model: object
    history: list[MetricsRow] = field(default_factory=list)


def finetune(model, reward, contexts: Sequence[int], cfg: TrainConfig, rng: np.random.Generator,
             rollout_fn: RolloutFn, logprob_fn: LogprobFn, on_epoch=None) -> FinetuneResult:
    """Generic collect / normalise / update loop shared by the consistency and diffusion arms.

    ``reward`` must expose ``batch(samples, contexts)`` and a monotone ``count``
    (see :class:`rlcm.rewards.QueryCounter`).
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    stats = ContextStats(cfg.buffer_size, cfg.min_count)
    adam = nn.AdamState()
    history: list[MetricsRow] = []
    clock0 = time.process_time()
    for epoch in range(cfg.epochs):
        frozen = model.copy()
        evals0 = frozen.n_evals
        batches = []
        for b in range(cfg.batches_per_epoch):
            ctx = contexts[rng.integers(len(contexts), size=cfg.sample_batch_size)]
            rngs = trajectory_rngs(cfg.seed, epoch, b * cfg.sample_batch_size, cfg.sample_batch_size)
            batches.append(rollout_fn(frozen, ctx, rngs))
        pool = RolloutBatch.concat(batches)
        calls_per_traj = (frozen.n_evals - evals0) / len(pool)
        pool.rewards = reward.batch(pool.terminals, pool.contexts)
        pool.advantages = normalize_batch(stats, pool.contexts, pool.rewards, cfg.adv_clip_max)

        updates: list[UpdateStats] = []
        group = cfg.train_batch_size * cfg.grad_accum_steps
        for _ in range(cfg.inner_epochs):
            perm = rng.permutation(len(pool))
            for start in range(0, len(pool), group):
                idx = perm[start:start + group]
                mbs = [pool.take(idx[i:i + cfg.train_batch_size])
                       for i in range(0, len(idx), cfg.train_batch_size)]
                updates.append(policy_update(model, frozen, mbs, cfg, adam, logprob_fn))

        row = MetricsRow(
            epoch=epoch,
            reward_queries=reward.count,
            wall_clock_s=time.process_time() - clock0,
            reward_mean=float(np.mean(pool.rewards)),
            reward_std=float(np.std(pool.rewards)),
            surrogate_loss=float(np.mean([u.loss for u in updates])),
            grad_norm=float(np.mean([u.grad_norm for u in updates])),
            clip_fraction=float(np.mean([u.clip_fraction for u in updates])),
            model_calls_per_traj=calls_per_traj,
            stochastic_steps=pool.logprobs.shape[1],
            seed=cfg.seed,
        )
        values = [row.reward_mean, row.surrogate_loss, row.grad_norm]
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteError(f"non-finite metrics at epoch {epoch}: {row}")
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, model, row)
    return FinetuneResult(model, history)


def train(model, reward, contexts: Sequence[int], cfg: TrainConfig, rng: np.random.Generator,
          on_epoch=None) -> FinetuneResult:
    """RLCM: fine-tune a consistency model through its H-step sampling MDP."""
    grid = karras_grid(cfg.horizon, model.eps, model.T, cfg.rho)

    def collect(m, ctx, rngs):
        return rollout_batch(m, grid, ctx, rngs)

    return finetune(model, reward, contexts, cfg, rng, collect, policy_logprob, on_epoch)
