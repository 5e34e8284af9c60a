"""Consistency function, VE forward noising and consistency training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ContractError, NonFiniteError, ParamStore, Tensor


class DomainError(ValueError):
    pass


def c_skip(t, eps: float, sigma_data: float):
    return sigma_data ** 2 / ((t - eps) ** 2 + sigma_data ** 2)


def c_out(t, eps: float, sigma_data: float):
    return sigma_data * (t - eps) / np.sqrt(sigma_data ** 2 + t ** 2)


def c_in(t, sigma_data: float):
    return 1.0 / np.sqrt(sigma_data ** 2 + t ** 2)


@dataclass
class ConsistencyModel:
    """f(x, t, c) = c_skip(t) x + c_out(t) F(x, t, c) with F a context-conditioned MLP.

    ``n_evals`` counts network evaluations (one per sample row).
    """

    params: ParamStore
    dim: int
    n_contexts: int
    T: float = 80.0
    eps: float = 0.002
    sigma_data: float = 0.5
    activation: str = "tanh"
    n_freq: int = 8
    n_evals: int = field(default=0, compare=False)

    kind = "consistency"

    def __post_init__(self):
        if not 0 < self.eps < self.T:
            raise ContractError(f"need 0 < eps < T, got eps={self.eps}, T={self.T}")
        if self.sigma_data <= 0:
            raise ContractError("sigma_data must be positive")

    @classmethod
    def create(cls, dim: int, n_contexts: int, rng: np.random.Generator, hidden=(256, 256),
               embed_dim: int = 8, **kw) -> "ConsistencyModel":
        n_freq = kw.get("n_freq", 8)
        params = ParamStore()
        params.add("embed", rng.standard_normal((n_contexts, embed_dim)))
        nn.init_mlp(rng, [dim + 2 * n_freq + 1 + embed_dim, *hidden, dim], store=params)
        return cls(params=params, dim=dim, n_contexts=n_contexts, **kw)

    def hparams(self) -> dict:
        return {"dim": self.dim, "n_contexts": self.n_contexts, "T": self.T, "eps": self.eps,
                "sigma_data": self.sigma_data, "activation": self.activation, "n_freq": self.n_freq}

    def with_params(self, params: ParamStore) -> "ConsistencyModel":
        return ConsistencyModel(params=params, **self.hparams())

    def copy(self) -> "ConsistencyModel":
        return self.with_params(self.params.copy())


def _batch_args(model, x, t, c):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise nn.DimensionError(f"sample width {x.shape[-1]} != model dim {model.dim}")
    x2 = x.reshape(-1, model.dim)
    n = x2.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy() if np.ndim(t) == 0 \
        else np.asarray(t, dtype=np.float64).reshape(n)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)) if np.ndim(c) == 0 \
        else np.asarray(c, dtype=np.int64).reshape(n)
    if np.any(t < model.eps) or np.any(t > model.T):
        raise DomainError(f"time outside [{model.eps}, {model.T}]: {t.min()}..{t.max()}")
    if np.any(c < 0) or np.any(c >= model.n_contexts):
        raise DomainError(f"context id outside vocabulary of size {model.n_contexts}")
    return x2, t, c


def network(model, x2: np.ndarray, t: np.ndarray, c: np.ndarray) -> Tensor:
    """The trainable F(x, t, c): input-scaled sample, time features and context embedding."""
    model.n_evals += x2.shape[0]
    xin = x2 * c_in(t, model.sigma_data)[:, None]
    emb = nn.take_rows(model.params.leaf("embed"), c)
    return nn.mlp_forward(model.params, xin, nn.time_features(t, model.n_freq), emb,
                          activation=model.activation)


def consistency_forward(model: ConsistencyModel, x, t, c) -> Tensor:
    """Batched f(x, t, c) as a (B, dim) Tensor, recorded on the active tape."""
    x2, t, c = _batch_args(model, x, t, c)
    F = network(model, x2, t, c)
    skip = c_skip(t, model.eps, model.sigma_data)[:, None]
    out = c_out(t, model.eps, model.sigma_data)[:, None]
    return nn.add(x2 * skip, nn.mul(F, out))


def consistency_apply(model: ConsistencyModel, x, t, c) -> np.ndarray:
    """Evaluate f(x, t, c); the result has the shape of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return consistency_forward(model, x, t, c).data.reshape(x.shape)


def forward_noise(x0, t: float, z) -> np.ndarray:
    """Marginal of the variance-exploding process at time ``t``: x0 + t z."""
    x0, z = np.asarray(x0, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise nn.DimensionError(f"noise shape {z.shape} != sample shape {x0.shape}")
    return x0 + t * z


def ema_update(target: ParamStore, online: ParamStore, decay: float) -> ParamStore:
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1), got {decay}")
    if set(target.params) != set(online.params):
        raise ContractError("EMA target and online parameter names differ")
    for name, p in target.params.items():
        p *= decay
        p += (1.0 - decay) * online.params[name]
    return target


def karras_times(n: int, eps: float, T: float, rho: float = 7.0) -> np.ndarray:
    """n increasing times from eps to T on the rho-warped grid."""
    i = np.arange(n) / (n - 1)
    ts = (eps ** (1 / rho) + i * (T ** (1 / rho) - eps ** (1 / rho))) ** rho
    ts[0], ts[-1] = eps, T
    return ts


@dataclass
class CTConfig:
    """Consistency-training hyperparameters."""

    n_discretization: int = 40
    ema_decay: float = 0.95
    metric: str = "l2"
    iterations: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    rho: float = 7.0
    huber_c: float = 0.03
    log_every: int = 100
    max_grad_norm: float = 5.0

    def __post_init__(self):
        if self.n_discretization < 2:
            raise ContractError("consistency training needs at least 2 discretization points")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ContractError("EMA decay must lie in [0, 1)")
        if self.metric not in ("l2", "pseudo_huber"):
            raise ContractError(f"unknown metric {self.metric!r}")


@dataclass
class LossHistory:
    losses: list[float] = field(default_factory=list)
    logged: list[tuple[int, float]] = field(default_factory=list)

    def record(self, it: int, loss: float, log_every: int) -> None:
        self.losses.append(loss)
        if (it + 1) % log_every == 0:
            self.logged.append((it + 1, float(np.mean(self.losses[-log_every:]))))


def distance(a: Tensor, b, metric: str, huber_c: float) -> Tensor:
    """Per-row distance d(a, b), shape (B,)."""
    sq = nn.sum(nn.square(nn.sub(a, b)), axis=1)
    if metric == "l2":
        return sq
    c2 = huber_c ** 2 * a.shape[1]
    return nn.sub(nn.sqrt(nn.add(sq, c2)), math.sqrt(c2))


def ct_pretrain(model: ConsistencyModel, dataset, cfg: CTConfig, rng: np.random.Generator):
    """Consistency training against an EMA target; returns (model, LossHistory)."""
    times = karras_times(cfg.n_discretization, model.eps, model.T, cfg.rho)
    target = model.copy()
    state = nn.AdamState()
    history = LossHistory()
    for it in range(cfg.iterations):
        x0, c = dataset.sample(rng, cfg.batch_size)
        n = rng.integers(cfg.n_discretization - 1, size=cfg.batch_size)
        z = rng.standard_normal(x0.shape)
        t_hi, t_lo = times[n + 1], times[n]
        ref = consistency_forward(target, x0 + t_lo[:, None] * z, t_lo, c).data
        model.params.zero_grad()
        with nn.Tape() as tape:
            pred = consistency_forward(model, x0 + t_hi[:, None] * z, t_hi, c)
            weight = 1.0 / (t_hi - t_lo)
            loss = nn.mean(nn.mul(distance(pred, ref, cfg.metric, cfg.huber_c), weight))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"consistency loss became non-finite at iteration {it}")
        nn.backward(tape, loss)
        nn.clip_grad_norm(model.params, cfg.max_grad_norm)
        nn.adam_step(model.params, state, cfg.lr)
        ema_update(target.params, model.params, cfg.ema_decay)
        history.record(it, value, cfg.log_every)
    return model, history
