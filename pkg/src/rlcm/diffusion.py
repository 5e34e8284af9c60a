"""Noise-conditional denoiser, VE ancestral sampling and DDPO fine-tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .consistency import DomainError, LossHistory
from .nn import ContractError, NonFiniteError, ParamStore, Tensor
from .rollout import HALF_LOG_2PI, RolloutBatch, _rowwise_logprob
from .trainer import FinetuneResult, TrainConfig, finetune


@dataclass(frozen=True)
class NoiseGrid:
    """Strictly decreasing noise levels sigmas[0] = T > ... > sigmas[H] = eps."""

    sigmas: np.ndarray

    @property
    def H(self) -> int:
        return len(self.sigmas) - 1


def geometric_grid(H: int, eps: float, T: float) -> NoiseGrid:
    if H < 1 or not 0 < eps < T:
        raise ContractError(f"invalid noise grid: H={H}, eps={eps}, T={T}")
    s = T * (eps / T) ** (np.arange(H + 1) / H)
    s[0], s[-1] = T, eps
    return NoiseGrid(s)


@dataclass
class ScoreModel:
    """Preconditioned denoiser D(x, sigma, c); the score is (D - x) / sigma^2."""

    params: ParamStore
    dim: int
    n_contexts: int
    T: float = 80.0
    eps: float = 0.002
    sigma_data: float = 0.5
    H_diff: int = 50
    activation: str = "tanh"
    n_freq: int = 8
    n_evals: int = field(default=0, compare=False)

    kind = "diffusion"

    @classmethod
    def create(cls, dim: int, n_contexts: int, rng: np.random.Generator, hidden=(256, 256),
               embed_dim: int = 8, **kw) -> "ScoreModel":
        n_freq = kw.get("n_freq", 8)
        params = ParamStore()
        params.add("embed", rng.standard_normal((n_contexts, embed_dim)))
        nn.init_mlp(rng, [dim + 2 * n_freq + 1 + embed_dim, *hidden, dim], store=params)
        return cls(params=params, dim=dim, n_contexts=n_contexts, **kw)

    def hparams(self) -> dict:
        return {"dim": self.dim, "n_contexts": self.n_contexts, "T": self.T, "eps": self.eps,
                "sigma_data": self.sigma_data, "H_diff": self.H_diff,
                "activation": self.activation, "n_freq": self.n_freq}

    def copy(self) -> "ScoreModel":
        return ScoreModel(params=self.params.copy(), **self.hparams())

    @property
    def grid(self) -> NoiseGrid:
        return geometric_grid(self.H_diff, self.eps, self.T)


def denoise(model: ScoreModel, x, sigma, c) -> Tensor:
    """Batched D(x, sigma, c), recorded on the active tape."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.dim)
    n = x.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)).copy()
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if np.any(sigma <= 0):
        raise DomainError("noise level must be positive")
    if np.any(c < 0) or np.any(c >= model.n_contexts):
        raise DomainError(f"context id outside vocabulary of size {model.n_contexts}")
    model.n_evals += n
    sd2 = model.sigma_data ** 2
    skip = (sd2 / (sigma ** 2 + sd2))[:, None]
    out = (sigma * model.sigma_data / np.sqrt(sigma ** 2 + sd2))[:, None]
    xin = x / np.sqrt(sigma ** 2 + sd2)[:, None]
    emb = nn.take_rows(model.params.leaf("embed"), c)
    F = nn.mlp_forward(model.params, xin, nn.time_features(sigma, model.n_freq), emb,
                       activation=model.activation)
    return nn.add(x * skip, nn.mul(F, out))


@dataclass
class DSMConfig:
    iterations: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    log_every: int = 100
    max_grad_norm: float = 5.0


def dsm_pretrain(model: ScoreModel, dataset, cfg: DSMConfig, rng: np.random.Generator):
    """Denoising score matching with log-uniform noise levels; returns (model, LossHistory)."""
    state = nn.AdamState()
    history = LossHistory()
    lo, hi = math.log(model.eps), math.log(model.T)
    sd = model.sigma_data
    for it in range(cfg.iterations):
        x0, c = dataset.sample(rng, cfg.batch_size)
        sigma = np.exp(rng.uniform(lo, hi, size=cfg.batch_size))
        z = rng.standard_normal(x0.shape)
        weight = (sigma ** 2 + sd ** 2) / (sigma * sd) ** 2
        model.params.zero_grad()
        with nn.Tape() as tape:
            D = denoise(model, x0 + sigma[:, None] * z, sigma, c)
            err = nn.sum(nn.square(nn.sub(D, x0)), axis=1)
            loss = nn.mean(nn.mul(err, weight))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"denoising loss became non-finite at iteration {it}")
        nn.backward(tape, loss)
        nn.clip_grad_norm(model.params, cfg.max_grad_norm)
        nn.adam_step(model.params, state, cfg.lr)
        history.record(it, value, cfg.log_every)
    return model, history


def _ancestral_coeffs(s_i: float, s_next: float) -> tuple[float, float, float]:
    """(weight on x, weight on D, std) of the VE ancestral transition s_i -> s_next."""
    if not s_next < s_i:
        raise ContractError(f"noise levels must strictly decrease, got {s_i} -> {s_next}")
    keep = s_next ** 2 / s_i ** 2
    std = math.sqrt(s_next ** 2 * (s_i ** 2 - s_next ** 2) / s_i ** 2)
    return keep, 1.0 - keep, std


def ancestral_step(model: ScoreModel, x, i: int, c, z, grid: NoiseGrid | None = None):
    """One ancestral step from level i to i+1: returns (next x, mean, std).

    mean = x + (s_i^2 - s_{i+1}^2) * score, which equals keep*x + (1-keep)*D.
    """
    grid = grid or model.grid
    if not 0 <= i < grid.H:
        raise ContractError(f"step index {i} outside [0, {grid.H})")
    keep, move, std = _ancestral_coeffs(float(grid.sigmas[i]), float(grid.sigmas[i + 1]))
    x = np.asarray(x, dtype=np.float64)
    D = denoise(model, x, grid.sigmas[i], c).data.reshape(x.shape)
    mean = keep * x + move * D
    return mean + std * np.asarray(z), mean, std


@dataclass
class DiffusionTrajectory:
    context: int
    states: np.ndarray
    logprobs: np.ndarray
    sigmas: np.ndarray
    reward: float = float("nan")
    advantage: float = float("nan")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


class DiffusionBatch(RolloutBatch):
    """Batched ancestral-sampling trajectories; every one of the H_diff steps is stochastic."""

    def trajectory(self, i: int) -> DiffusionTrajectory:
        return DiffusionTrajectory(
            context=int(self.contexts[i]),
            states=np.concatenate([self.states[i], self.actions[i, -1:]]),
            logprobs=self.logprobs[i].copy(),
            sigmas=self.grid.sigmas.copy(),
            reward=float("nan") if self.rewards is None else float(self.rewards[i]),
            advantage=float("nan") if self.advantages is None else float(self.advantages[i]),
        )


def diffusion_rollout(model: ScoreModel, contexts, rngs) -> DiffusionBatch:
    """Sample one ancestral trajectory per (context, rng) pair, recording step log-densities."""
    grid = model.grid
    contexts = np.asarray(contexts, dtype=np.int64)
    B, d, H = len(contexts), model.dim, grid.H
    x = grid.sigmas[0] * np.stack([r.standard_normal(d) for r in rngs])
    states = np.empty((B, H, d))
    actions = np.empty((B, H, d))
    logprobs = np.empty((B, H))
    for i in range(H):
        states[:, i] = x
        z = np.stack([r.standard_normal(d) for r in rngs])
        x, mean, std = ancestral_step(model, x, i, contexts, z, grid)
        logprobs[:, i] = _rowwise_logprob(mean, std, x)
        actions[:, i] = x
    return DiffusionBatch(contexts, states, actions, logprobs, grid)


def diffusion_logprob(model: ScoreModel, batch: RolloutBatch) -> Tensor:
    """log p_theta(x_{i+1} | x_i, c) for every step, shape (B, H_diff), on the active tape."""
    B, H, d = batch.states.shape
    sig = batch.grid.sigmas
    coeffs = [_ancestral_coeffs(float(sig[i]), float(sig[i + 1])) for i in range(H)]
    keep = np.tile([k for k, _, _ in coeffs], B)[:, None]
    move = np.tile([m for _, m, _ in coeffs], B)[:, None]
    stds = np.tile([s for _, _, s in coeffs], B)
    states = batch.states.reshape(B * H, d)
    D = denoise(model, states, np.tile(sig[:H], B), np.repeat(batch.contexts, H))
    mean = nn.add(keep * states, nn.mul(D, move))
    sq = nn.sum(nn.square(nn.sub(batch.actions.reshape(B * H, d), mean)), axis=1)
    logp = nn.sub(nn.mul(sq, -1.0 / (2.0 * stds * stds)), d * (np.log(stds) + HALF_LOG_2PI))
    return nn.reshape(logp, (B, H))


def replay_logprobs(model: ScoreModel, traj: DiffusionTrajectory) -> np.ndarray:
    out = []
    grid = NoiseGrid(traj.sigmas)
    for i in range(len(traj.logprobs)):
        _, mean, std = ancestral_step(model, traj.states[i][None], i, traj.context,
                                      np.zeros((1, model.dim)), grid)
        out.append(_rowwise_logprob(mean, np.float64(std), traj.states[i + 1][None])[0])
    return np.array(out)


def ddpo_finetune(model: ScoreModel, reward, contexts, cfg: TrainConfig, rng: np.random.Generator,
                  on_epoch=None) -> FinetuneResult:
    """DDPO: the same clipped-surrogate loop as RLCM, over the H_diff-step denoising MDP."""
    return finetune(model, reward, contexts, cfg, rng, diffusion_rollout, diffusion_logprob,
                    on_epoch)
