"""Black-box rewards evaluated on terminal samples only."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.fft import dctn

from .nn import ContractError


def _pad_to_blocks(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    return np.pad(img, ((0, ph), (0, pw)), mode="edge") if ph or pw else img


def compress_proxy_size(image, h: int | None = None, w: int | None = None,
                        quant_step: float = 16.0) -> float:
    """Bytes needed by an 8x8-block DCT codec with an ideal entropy coder.

    The image (values in [0, 1]) is quantised to 8 bits, level-shifted, transformed per
    block with the orthonormal type-II DCT, uniformly quantised with ``quant_step``, and
    sized as an 8-byte header plus ceil(n * H / 8) bytes, H being the empirical entropy
    in bits/symbol of the quantised coefficient stream.
    """
    img = np.asarray(image, dtype=np.float64)
    if h is not None and w is not None:
        img = img.reshape(h, w)
    if img.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    pix = np.round(img * 255.0) - 128.0
    pix = _pad_to_blocks(pix)
    H, W = pix.shape
    blocks = pix.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    # snap away last-ulp transform noise so exact .5 ties round the same on every backend
    symbols = np.round(np.round(coef, 9) / quant_step).astype(np.int64).ravel()
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    entropy = float(-np.sum(p * np.log2(p)))
    return 8.0 + math.ceil(symbols.size * entropy / 8.0 - 1e-9)


def reward_compress(image, c=None) -> float:
    return -compress_proxy_size(image)


def reward_incompress(image, c=None) -> float:
    return compress_proxy_size(image)


def reward_target2d(x, c, goals: np.ndarray) -> float:
    return -float(np.linalg.norm(np.asarray(x, dtype=np.float64) - goals[c]))


class BlackboxScorer:
    """A frozen random MLP scoring (sample, context); only scalar outputs are exposed."""

    def __init__(self, dim: int, n_contexts: int, seed: int, hidden: int = 32):
        rng = np.random.default_rng([seed, 7919])
        self.seed = seed
        self._emb = rng.standard_normal((n_contexts, 4))
        self._W1 = rng.standard_normal((dim + 4, hidden)) / math.sqrt(dim + 4)
        self._b1 = rng.standard_normal(hidden) * 0.5
        self._w2 = rng.standard_normal(hidden) / math.sqrt(hidden)

    def __call__(self, x, c) -> float:
        h = np.concatenate([np.ravel(x), self._emb[int(c)]]) @ self._W1 + self._b1
        return float(np.tanh(h) @ self._w2)


@dataclass
class RewardFn:
    """A named black-box reward ``fn(terminal_sample, context) -> float``."""

    name: str
    fn: Callable[[np.ndarray, int], float]
    pure: bool = True

    def __call__(self, x, c) -> float:
        return float(self.fn(x, int(c)))


class QueryCounter:
    """Counts every evaluation of the wrapped reward."""

    def __init__(self, reward: RewardFn):
        self.reward = reward
        self.count = 0

    @property
    def name(self) -> str:
        return self.reward.name

    def __call__(self, x, c) -> float:
        self.count += 1
        return self.reward(x, c)

    def batch(self, xs: np.ndarray, cs: np.ndarray) -> np.ndarray:
        return np.array([self(x, c) for x, c in zip(xs, cs)])


TASK_DATASET = {"target2d": "mixture2d", "blackbox": "mixture2d",
                "compress": "patterns8", "incompress": "patterns8"}


def make_reward(task: str, dataset, scorer_seed: int = 0, quant_step: float = 16.0) -> RewardFn:
    """Build the reward for ``task`` over samples living in ``dataset``'s model space."""
    if task == "target2d":
        goals = dataset.goals()
        return RewardFn("target2d", lambda x, c: reward_target2d(x, c, goals))
    if task == "blackbox":
        return RewardFn("blackbox", BlackboxScorer(dataset.dim, dataset.n_contexts, scorer_seed))
    if task in ("compress", "incompress"):
        sign = -1.0 if task == "compress" else 1.0
        to_image = getattr(dataset, "to_image", None)
        if to_image is None:
            raise ContractError(f"task {task!r} needs an image dataset")
        return RewardFn(task, lambda x, c: sign * compress_proxy_size(to_image(x)[0],
                                                                      quant_step=quant_step))
    raise ContractError(f"unknown task {task!r}; choose from {sorted(TASK_DATASET)}")
