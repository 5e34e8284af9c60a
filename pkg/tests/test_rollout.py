import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_cm
from rlcm.consistency import consistency_apply
from rlcm.nn import ContractError
from rlcm.rollout import (gaussian_logprob, karras_grid, multistep_sample, policy_logprob,
                          replay_logprobs, rollout, rollout_batch, trajectory_rngs)


def mp_karras_point(i, H, eps, T, rho):
    mpmath.mp.dps = 50
    T, eps, rho = mpmath.mpf(T), mpmath.mpf(eps), mpmath.mpf(rho)
    return float((T ** (1 / rho) + mpmath.mpf(i) / H * (eps ** (1 / rho) - T ** (1 / rho))) ** rho)


class ZeroNoise:
    def standard_normal(self, size):
        return np.zeros(size)


# grid

def test_grid_h1_is_endpoints():
    assert list(karras_grid(1, 0.002, 80.0).points) == [80.0, 0.002]


def test_grid_h2_midpoint():
    mid = karras_grid(2, 0.002, 80.0, 7.0).points[1]
    assert mid == pytest.approx(mp_karras_point(1, 2, "0.002", 80, 7), rel=1e-13)
    assert mid == pytest.approx(2.515, abs=5e-4)


@given(st.integers(1, 200), st.floats(1e-4, 1.0), st.floats(2.0, 200.0), st.floats(0.5, 10.0))
def test_grid_strictly_decreasing_with_exact_endpoints(H, eps, T, rho):
    g = karras_grid(H, eps, T, rho)
    assert g.points[0] == T and g.points[-1] == eps
    assert np.all(np.diff(g.points) < 0)
    stds = g.stds()
    assert np.all(np.diff(stds) <= 0) and stds[-1] == 0.0 and np.all(stds[:-1] > 0)


@pytest.mark.parametrize("args", [(0, 0.002, 80.0), (4, 0.0, 80.0), (4, 90.0, 80.0), (4, 0.002, 80.0, -1.0)])
def test_grid_rejects_invalid(args):
    with pytest.raises(ContractError):
        karras_grid(*args)


# sampler

def test_h1_sample_is_one_consistency_call(cm):
    g = karras_grid(1, cm.eps, cm.T)
    x = multistep_sample(cm, g, 1, np.random.default_rng(3))
    x_T = cm.T * np.random.default_rng(3).standard_normal(2)
    assert np.array_equal(x, consistency_apply(cm, x_T[None], cm.T, 1)[0])


def test_sample_deterministic(cm):
    g = karras_grid(4, cm.eps, cm.T)
    a = multistep_sample(cm, g, 0, np.random.default_rng(5))
    b = multistep_sample(cm, g, 0, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_h2_zero_noise_composition(cm):
    g = karras_grid(2, cm.eps, cm.T)
    x = multistep_sample(cm, g, 2, ZeroNoise())
    first = consistency_apply(cm, np.zeros((1, 2)), cm.T, 2)
    want = consistency_apply(cm, first, g.points[1], 2)[0]
    assert np.array_equal(x, want)


def test_grid_must_match_model(cm):
    with pytest.raises(ContractError):
        multistep_sample(cm, karras_grid(2, 0.01, cm.T), 0, np.random.default_rng(0))


# rollout

def test_rollout_matches_sampler_over_seeds(cm):
    g = karras_grid(8, cm.eps, cm.T)
    for seed in range(100):
        c = seed % 4
        traj = rollout(cm, g, c, np.random.default_rng(seed))
        assert np.array_equal(traj.terminal, multistep_sample(cm, g, c, np.random.default_rng(seed)))


def test_batched_rollout_independent_of_batching(cm):
    g = karras_grid(6, cm.eps, cm.T)
    ctx = np.array([0, 3, 1, 2, 2])
    whole = rollout_batch(cm, g, ctx, trajectory_rngs(1, 2, 0, 5))
    for i in range(5):
        alone = rollout_batch(cm, g, ctx[i:i + 1], trajectory_rngs(1, 2, i, 1))
        assert np.allclose(alone.actions[0], whole.actions[i], rtol=0, atol=1e-12)


def test_trajectory_structure(cm):
    g = karras_grid(8, cm.eps, cm.T)
    traj = rollout(cm, g, 1, np.random.default_rng(0))
    assert len(traj.logprobs) == 7 and np.all(np.isfinite(traj.logprobs))
    assert traj.states.shape == (9, 2) and traj.actions.shape == (8, 2)
    assert np.array_equal(traj.states[1:], traj.actions)
    assert np.array_equal(traj.stds, g.stds()[:7])


def test_replay_reproduces_logprobs(cm):
    g = karras_grid(8, cm.eps, cm.T)
    for seed in range(5):
        traj = rollout(cm, g, seed % 4, np.random.default_rng(seed))
        assert np.max(np.abs(replay_logprobs(cm, traj) - traj.logprobs)) <= 1e-12


def test_policy_logprob_matches_stored(cm):
    g = karras_grid(5, cm.eps, cm.T)
    batch = rollout_batch(cm, g, [0, 1, 2], trajectory_rngs(0, 0, 0, 3))
    assert np.max(np.abs(policy_logprob(cm, batch).data - batch.logprobs)) <= 1e-12


def test_h1_rollout_has_no_stochastic_steps(cm):
    batch = rollout_batch(cm, karras_grid(1, cm.eps, cm.T), [0, 1], trajectory_rngs(0, 0, 0, 2))
    assert batch.n_stochastic == 0 and policy_logprob(cm, batch).shape == (2, 0)


def test_model_calls_per_trajectory():
    m = small_cm()
    rollout_batch(m, karras_grid(8, m.eps, m.T), [0] * 4, trajectory_rngs(0, 0, 0, 4))
    assert m.n_evals == 8 * 4


# gaussian log-density

def test_logprob_at_mean():
    assert gaussian_logprob(np.zeros(2), 1.0, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert gaussian_logprob(np.zeros(2), 1.0, np.zeros(2)) == pytest.approx(-1.83788, abs=1e-5)


def test_logprob_closed_form():
    want = -0.5 - math.log(2.0) - 0.5 * math.log(2 * math.pi)
    assert gaussian_logprob(np.zeros(1), 2.0, np.array([2.0])) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(-2.11209, abs=1e-5)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0.01, 10.0), st.integers(0, 1000))
def test_logprob_symmetric(mean, std, seed):
    mean = np.array(mean)
    delta = np.random.default_rng(seed).standard_normal(mean.shape)
    assert gaussian_logprob(mean, std, mean + delta) == pytest.approx(
        gaussian_logprob(mean, std, mean - delta), abs=1e-9)


@pytest.mark.parametrize("std", [0.0, -1.0])
def test_logprob_rejects_nonpositive_std(std):
    with pytest.raises(ContractError):
        gaussian_logprob(np.zeros(2), std, np.zeros(2))
