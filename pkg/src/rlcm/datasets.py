"""Synthetic datasets with a finite context vocabulary."""
from __future__ import annotations

import math

import numpy as np


class Mixture2D:
    """Eight isotropic Gaussians on a circle; context ``c`` covers components ``2c`` and ``2c+1``."""

    name = "mixture2d"
    dim = 2
    n_contexts = 4

    def __init__(self, radius: float = 1.0, std: float = 0.1):
        self.radius = radius
        self.std = std
        ang = 2.0 * math.pi * np.arange(8) / 8
        self.centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.components = np.array([[2 * c, 2 * c + 1] for c in range(self.n_contexts)])

    def sample(self, rng: np.random.Generator, n: int, contexts=None):
        c = rng.integers(self.n_contexts, size=n) if contexts is None else np.asarray(contexts)
        comp = self.components[c, rng.integers(2, size=n)]
        x = self.centers[comp] + self.std * rng.standard_normal((n, 2))
        return x, c

    def goals(self) -> np.ndarray:
        """Goal point per context for the target reward: the centre of its first component."""
        return self.centers[self.components[:, 0]]


class PointMass:
    """Degenerate dataset: every sample equals ``point``."""

    name = "point"

    def __init__(self, point, n_contexts: int = 1):
        self.point = np.asarray(point, dtype=np.float64)
        self.dim = self.point.size
        self.n_contexts = n_contexts

    def sample(self, rng: np.random.Generator, n: int, contexts=None):
        c = rng.integers(self.n_contexts, size=n) if contexts is None else np.asarray(contexts)
        return np.broadcast_to(self.point, (n, self.dim)).copy(), c


class Patterns8:
    """8x8 grayscale stripes, disks and checkerboards; context = pattern class.

    Model space is ``2*image - 1``; use :meth:`to_image` to map samples back to [0, 1].
    """

    name = "patterns8"
    side = 8
    dim = 64
    n_contexts = 3
    classes = ("stripes", "disks", "checkers")

    def _one(self, rng: np.random.Generator, kind: int) -> np.ndarray:
        lo, hi = rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)
        if rng.random() < 0.5:
            lo, hi = hi, lo
        yy, xx = np.mgrid[0:8, 0:8]
        if kind == 0:
            period = rng.choice([2, 4])
            coord = yy if rng.random() < 0.5 else xx
            mask = ((coord + rng.integers(period)) // (period // 2)) % 2 == 0
        elif kind == 1:
            cy, cx = rng.uniform(2.0, 6.0, size=2)
            r = rng.uniform(1.5, 3.0)
            mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
        else:
            cell = rng.choice([2, 4])
            mask = ((yy // cell) + (xx // cell)) % 2 == 0
        return np.where(mask, hi, lo)

    def sample(self, rng: np.random.Generator, n: int, contexts=None):
        c = rng.integers(self.n_contexts, size=n) if contexts is None else np.asarray(contexts)
        imgs = np.stack([self._one(rng, int(k)) for k in c])
        return 2.0 * imgs.reshape(n, self.dim) - 1.0, c

    @staticmethod
    def to_image(x: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0).reshape(-1, 8, 8)


DATASETS = {"mixture2d": Mixture2D, "patterns8": Patterns8}


def make_dataset(name: str):
    try:
        return DATASETS[name]()
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None
