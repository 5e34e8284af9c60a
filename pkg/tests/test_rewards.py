import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rlcm.datasets import Mixture2D, Patterns8
from rlcm.nn import ContractError
from rlcm.rewards import (BlackboxScorer, QueryCounter, compress_proxy_size, make_reward,
                          reward_compress, reward_incompress, reward_target2d)


def dct_matrix(n=8):
    k, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    C = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    C[0] /= np.sqrt(2.0)
    return C


def proxy_oracle(img, step=16):
    """Same definition computed with an explicit DCT matrix and a Counter-style histogram."""
    pix = np.round(np.asarray(img) * 255.0) - 128.0
    C = dct_matrix()
    symbols = []
    for by in range(0, pix.shape[0], 8):
        for bx in range(0, pix.shape[1], 8):
            coef = np.round(C @ pix[by:by + 8, bx:bx + 8] @ C.T, 9)
            symbols.extend(int(v) for v in np.round(coef / step).ravel())
    n = len(symbols)
    counts = {}
    for s in symbols:
        counts[s] = counts.get(s, 0) + 1
    H = -sum(c / n * math.log2(c / n) for c in counts.values())
    return 8 + math.ceil(n * H / 8 - 1e-9)


def test_constant_image_is_header_floor():
    size = compress_proxy_size(np.full((8, 8), 0.4))
    assert 8 <= size <= 9
    assert reward_compress(np.full((8, 8), 0.4)) == -size


def test_uniform_noise_size_range():
    img = np.random.default_rng(0).uniform(size=(64, 64))
    size = compress_proxy_size(img)
    assert 0.5 * (4096 + 8) <= size <= 1.0 * (4096 + 8)


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(8, 8), (16, 24), (8, 64)]))
def test_matches_matrix_dct_oracle(seed, shape):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=shape) if seed % 2 else np.clip(rng.normal(0.5, 0.05, shape), 0, 1)
    assert compress_proxy_size(img) == proxy_oracle(img)


def test_padding_by_edge_replication():
    img = np.random.default_rng(1).uniform(size=(6, 10))
    padded = np.pad(img, ((0, 2), (0, 6)), mode="edge")
    assert compress_proxy_size(img) == compress_proxy_size(padded)


def test_deterministic():
    img = np.random.default_rng(2).uniform(size=(16, 16))
    assert compress_proxy_size(img) == compress_proxy_size(img.copy())


@pytest.mark.parametrize("bad", [1.01, -0.01, np.nan])
def test_out_of_range_values_rejected(bad):
    img = np.zeros((8, 8))
    img[3, 3] = bad
    with pytest.raises(ContractError):
        compress_proxy_size(img)


def test_block_translation_invariance_for_periodic_pattern():
    yy, xx = np.mgrid[0:32, 0:32]
    img = ((xx // 2 + yy // 4) % 2).astype(float)
    shifted = np.roll(img, 8, axis=1)
    assert compress_proxy_size(img) == compress_proxy_size(shifted)


@given(st.integers(0, 2 ** 32 - 1))
def test_compress_and_incompress_are_negations(seed):
    img = np.random.default_rng(seed).uniform(size=(8, 8))
    assert reward_incompress(img) == -reward_compress(img)


def test_noise_beats_constant_under_incompress():
    noise = np.random.default_rng(3).uniform(size=(8, 8))
    assert reward_incompress(noise) > reward_incompress(np.zeros((8, 8)))


def test_target2d():
    goals = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert reward_target2d([1.0, 1.0], 1, goals) == 0.0
    assert reward_target2d([3.0, 4.0], 0, goals) == -5.0
    cands = np.random.default_rng(4).standard_normal((20, 2))
    best = max(range(20), key=lambda i: reward_target2d(cands[i], 1, goals))
    assert best == int(np.argmin(np.linalg.norm(cands - goals[1], axis=1)))


def test_blackbox_deterministic_and_seed_dependent():
    a, b = BlackboxScorer(2, 4, seed=0), BlackboxScorer(2, 4, seed=1)
    probes = np.random.default_rng(5).standard_normal((10, 2))
    assert all(a(p, 1) == BlackboxScorer(2, 4, seed=0)(p, 1) for p in probes)
    assert all(a(p, 1) != b(p, 1) for p in probes)


def test_query_counter_counts_each_call():
    counter = QueryCounter(make_reward("target2d", Mixture2D()))
    counter(np.zeros(2), 0)
    counter.batch(np.zeros((5, 2)), np.zeros(5, dtype=int))
    assert counter.count == 6


def test_make_reward_tasks():
    patterns = Patterns8()
    x, c = patterns.sample(np.random.default_rng(0), 1)
    img = patterns.to_image(x)[0]
    assert make_reward("compress", patterns)(x[0], c[0]) == -compress_proxy_size(img)
    assert make_reward("incompress", patterns)(x[0], c[0]) == compress_proxy_size(img)
    assert make_reward("blackbox", Mixture2D()).pure
    with pytest.raises(ContractError):
        make_reward("compress", Mixture2D())
    with pytest.raises(ContractError):
        make_reward("aesthetic", Mixture2D())
