import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from conftest import small_cm
from rlcm import nn
from rlcm.datasets import Mixture2D
from rlcm.metrics import read_metrics
from rlcm.nn import ContractError, NonFiniteError
from rlcm.rewards import QueryCounter, RewardFn, make_reward
from rlcm.rollout import karras_grid, policy_logprob, rollout_batch, trajectory_rngs
from rlcm.trainer import (ContextStats, TrainConfig, clipped_surrogate, normalize_batch,
                          normalize_reward, rlcm_update, train)

finite = st.floats(-1e3, 1e3)


# normalisation

def test_normalize_hand_example():
    stats = ContextStats(capacity=16, min_count=1)
    for r in (1, 2, 3, 4):
        stats.push(0, r)
    assert normalize_reward(stats, 0, 6.0, 10.0) == pytest.approx((6 - 2.5) / 1.118033988749895, abs=1e-12)
    assert normalize_reward(ContextStats(16, 1), 0, 6.0, 10.0) == 0.0


def test_normalize_hand_example_value():
    stats = ContextStats(capacity=16, min_count=1)
    for r in (1, 2, 3, 4):
        stats.push(0, r)
    assert stats.advantage(0, 6.0, 10.0) == pytest.approx(3.13050, abs=1e-5)


def test_normalize_constant_rewards():
    stats = ContextStats(16, 2)
    for _ in range(5):
        stats.push(1, 0.3)
    assert normalize_reward(stats, 1, 0.3, 10.0) == 0.0


def test_normalize_clips_to_a_max():
    for r, want in ((1e6, 10.0), (-1e6, -10.0)):
        stats = ContextStats(16, 2)
        for x in (1.0, 1.0 + 1e-9, 1.0):
            stats.push(0, x)
        assert normalize_reward(stats, 0, r, 10.0) == want


def test_center_only_below_min_count():
    stats = ContextStats(16, 16)
    for r in (0.0, 4.0):
        stats.push(0, r)
    assert stats.advantage(0, 5.0, 10.0) == 3.0


def test_normalize_rejects_non_finite():
    with pytest.raises(ContractError):
        normalize_reward(ContextStats(), 0, float("nan"), 10.0)


def test_normalize_batch_pushes_then_normalizes():
    stats = ContextStats(16, 1)
    adv = normalize_batch(stats, [0, 0, 1], [1.0, 3.0, 5.0], 10.0)
    assert np.allclose(adv, [-1.0, 1.0, 0.0])
    assert list(stats.buffer(0)) == [1.0, 3.0]


@given(st.lists(finite, min_size=1, max_size=40), st.integers(1, 16))
def test_buffer_statistics_match_recomputation(rewards, capacity):
    stats = ContextStats(capacity, 1)
    for r in rewards:
        stats.push(3, r)
    tail = np.array(rewards[-capacity:])
    mean, std, count = stats.stats(3)
    assert count == len(tail) <= capacity
    assert mean == pytest.approx(tail.mean(), abs=1e-9)
    assert std == pytest.approx(np.sqrt(np.mean((tail - tail.mean()) ** 2)), abs=1e-9)


@given(st.lists(st.tuples(st.integers(0, 3), finite), max_size=60), st.floats(0.1, 10.0))
def test_advantage_always_bounded(stream, a_max):
    stats = ContextStats(8, 4)
    for c, r in stream:
        assert abs(normalize_reward(stats, c, r, a_max)) <= a_max


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=16), st.floats(0.1, 10.0), st.floats(-10, 10))
def test_affine_invariance(rewards, a, b):
    assume(len(set(rewards[:-1])) >= 2 and np.std(rewards[:-1]) > 1e-3)
    plain, moved = ContextStats(16, 2), ContextStats(16, 2)
    for r in rewards[:-1]:
        plain.push(0, r)
        moved.push(0, a * r + b)
    r = rewards[-1]
    u, v = plain.advantage(0, r, 1e9), moved.advantage(0, a * r + b, 1e9)
    assert v == pytest.approx(u, rel=1e-6, abs=1e-6)


# surrogate

def test_surrogate_ratio_one():
    assert clipped_surrogate([0.3], [0.3], 2.0, 1e-4) == 2.0


def test_surrogate_clip_branch():
    lo = np.log(1.5)
    assert clipped_surrogate([lo], [0.0], 2.0, 1e-4) == pytest.approx(2.0002, abs=1e-12)


def test_surrogate_negative_advantage():
    assert clipped_surrogate([np.log(0.5)], [0.0], -1.0, 1e-4) == pytest.approx(-0.9999, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_surrogate_non_finite_ratio_names_step():
    with pytest.raises(NonFiniteError, match="step 1"):
        clipped_surrogate([0.0, 1e6, 0.0], [0.0, 0.0, 0.0], 1.0, 0.2)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.floats(0, 10), st.floats(0, 10),
       st.floats(1e-4, 0.5))
def test_surrogate_monotone_and_bounded(log_ratios, a1, a2, eps):
    lo, hi = sorted((a1, a2))
    old = np.zeros(len(log_ratios))
    s_lo = clipped_surrogate(log_ratios, old, lo, eps)
    s_hi = clipped_surrogate(log_ratios, old, hi, eps)
    assert s_lo <= s_hi + 1e-9
    assert s_hi <= hi * (1 + eps) * len(log_ratios) + 1e-9


def test_surrogate_per_trajectory_rows():
    out = clipped_surrogate(np.zeros((3, 2)), np.zeros((3, 2)), np.array([1.0, -2.0, 0.5]), 0.1)
    assert np.allclose(out, [2.0, -4.0, 1.0])


# update

def _batch(model, H=4, n=6, seed=0, advantages=None):
    batch = rollout_batch(model, karras_grid(H, model.eps, model.T), np.arange(n) % 4,
                          trajectory_rngs(seed, 0, 0, n))
    rng = np.random.default_rng(seed)
    batch.advantages = rng.standard_normal(n) if advantages is None else np.asarray(advantages, float)
    return batch


def test_first_pass_ratios_exactly_one():
    m = small_cm()
    frozen = m.copy()
    batch = _batch(frozen)
    stats = rlcm_update(m, frozen, batch, TrainConfig(), nn.AdamState())
    assert stats.max_abs_log_ratio == 0.0 and stats.clip_fraction == 0.0
    # surrogate at ratio 1 is steps * A per trajectory
    assert stats.loss == pytest.approx(-np.sum(batch.advantages) * batch.n_stochastic / len(batch), rel=1e-12)


def test_zero_advantages_leave_params_unchanged():
    m = small_cm()
    frozen = m.copy()
    before = m.params.flat().copy()
    batch = _batch(frozen, advantages=np.zeros(6))
    rlcm_update(m, frozen, batch, TrainConfig(), nn.AdamState())
    assert np.array_equal(m.params.flat(), before)


def _surrogate_loss(model, frozen, batch, eps):
    logp_old = policy_logprob(frozen, batch).data
    return clipped_surrogate(policy_logprob(model, batch), logp_old, batch.advantages, eps)


@pytest.mark.parametrize("eps", [1e-4, 0.2])
def test_single_step_gradient_is_reinforce(eps):
    m = small_cm(hidden=(8,))
    frozen = m.copy()
    batch = _batch(frozen, H=2, n=1, advantages=[1.7])
    m.params.zero_grad()
    with nn.Tape() as tape:
        obj = nn.sum(_surrogate_loss(m, frozen, batch, eps))
    nn.backward(tape, obj)
    step = 1e-5
    for name in m.params.names():
        p = m.params.params[name]
        for idx in list(np.ndindex(p.shape))[:12]:
            orig = p[idx]
            p[idx] = orig + step
            up = policy_logprob(m, batch).data.sum()
            p[idx] = orig - step
            down = policy_logprob(m, batch).data.sum()
            p[idx] = orig
            fd = 1.7 * (up - down) / (2 * step)
            assert abs(m.params.grads[name][idx] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_surrogate_gradient_with_wide_clip_matches_fd():
    m = small_cm(hidden=(8,))
    frozen = m.copy()
    batch = _batch(frozen, H=3, n=2)
    m.params.params["layer1.W"] += 0.01  # ratios away from 1
    m.params.zero_grad()
    with nn.Tape() as tape:
        obj = nn.sum(_surrogate_loss(m, frozen, batch, 0.3))
    nn.backward(tape, obj)
    p = m.params.params["layer1.W"]
    for idx in list(np.ndindex(p.shape))[:10]:
        orig = p[idx]
        p[idx] = orig + 1e-5
        up = float(np.sum(_surrogate_loss(m, frozen, batch, 0.3).data))
        p[idx] = orig - 1e-5
        down = float(np.sum(_surrogate_loss(m, frozen, batch, 0.3).data))
        p[idx] = orig
        fd = (up - down) / 2e-5
        assert abs(m.params.grads["layer1.W"][idx] - fd) <= 1e-4 * max(1.0, abs(fd))


# config and loop

@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"clip_range": 1.0}, {"horizon": 0}, {"buffer_size": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)


def test_train_config_table_defaults():
    cfg = TrainConfig()
    assert (cfg.clip_range, cfg.adv_clip_max, cfg.horizon, cfg.lr, cfg.max_grad_norm) == (1e-4, 10.0, 8, 1e-4, 5.0)
    assert (cfg.buffer_size, cfg.min_count) == (16, 16)


def test_zero_epochs():
    m = small_cm()
    before = m.params.flat().copy()
    reward = QueryCounter(make_reward("target2d", Mixture2D()))
    res = train(m, reward, range(4), TrainConfig(epochs=0), np.random.default_rng(0))
    assert res.history == [] and reward.count == 0
    assert np.array_equal(m.params.flat(), before)


def test_query_count_and_logged_steps():
    m = small_cm()
    reward = QueryCounter(make_reward("target2d", Mixture2D()))
    cfg = TrainConfig(epochs=3, batches_per_epoch=2, sample_batch_size=4, train_batch_size=2)
    res = train(m, reward, range(4), cfg, np.random.default_rng(0))
    assert reward.count == 3 * 2 * 4
    assert [row.reward_queries for row in res.history] == [8, 16, 24]
    assert all(row.stochastic_steps == 7 and row.model_calls_per_traj == 8 for row in res.history)


def test_rewards_see_terminal_samples_only():
    seen = []
    m = small_cm()
    reward = QueryCounter(RewardFn("spy", lambda x, c: seen.append(np.array(x)) or 0.0))
    cfg = TrainConfig(epochs=1, batches_per_epoch=1, sample_batch_size=4, train_batch_size=2)
    before = m.params.flat().copy()
    train(m, reward, range(4), cfg, np.random.default_rng(0))
    assert len(seen) == 4 and all(x.shape == (2,) for x in seen)
    # constant reward: zero advantages, no parameter change
    assert np.array_equal(m.params.flat(), before)


def test_non_finite_reward_aborts():
    m = small_cm()
    reward = QueryCounter(RewardFn("bad", lambda x, c: float("nan")))
    with pytest.raises(ContractError):
        train(m, reward, range(4), TrainConfig(epochs=1, batches_per_epoch=1, sample_batch_size=2,
                                               train_batch_size=2), np.random.default_rng(0))


def test_reward_improves_by_epoch_50(target_rlcm):
    _, paths = target_rlcm
    for path in paths:
        rows = read_metrics(path)
        assert rows[50]["reward_mean"] > rows[0]["reward_mean"], path
