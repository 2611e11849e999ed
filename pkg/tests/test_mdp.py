import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binomial_sigma, value_iteration_soft_q
from pessilab.mdp import (
    MdpSpec,
    TabularPolicy,
    exact_soft_q,
    make_random_mdp,
    sample_transition,
    soft_bellman,
)


def self_loop(reward=1.0, gamma=0.9):
    return MdpSpec(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma, np.ones(1))


def test_single_state_mdp_is_a_self_loop():
    mdp = make_random_mdp(1, 1, 0.9, seed=123)
    assert mdp.transition[0, 0, 0] == 1.0


def test_random_mdp_is_deterministic_in_seed():
    a, b = make_random_mdp(4, 3, 0.95, 11), make_random_mdp(4, 3, 0.95, 11)
    assert a.transition.tobytes() == b.transition.tobytes()
    assert a.reward.tobytes() == b.reward.tobytes()
    assert a.to_json() == b.to_json()


def test_rows_sum_to_one():
    mdp = make_random_mdp(5, 3, 0.99, seed=7)
    assert np.max(np.abs(mdp.transition.sum(axis=2) - 1.0)) <= 1e-12
    assert mdp.transition.shape == (5, 3, 5)


@pytest.mark.parametrize("bad", [dict(n_states=0), dict(n_actions=0), dict(gamma=1.0), dict(gamma=0.0)])
def test_random_mdp_rejects_bad_parameters(bad):
    kw = dict(n_states=2, n_actions=2, gamma=0.9, seed=0) | bad
    with pytest.raises(ValueError):
        make_random_mdp(**kw)


def test_spec_rejects_unnormalised_rows_and_p0():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(ValueError):
        MdpSpec(P * 1.01, np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        MdpSpec(P, np.zeros((2, 1)), 0.9, np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        MdpSpec(P, np.zeros((2, 1)), 1.5, np.array([0.5, 0.5]))


def test_json_round_trip_and_strict_keys(tmp_path):
    mdp = make_random_mdp(3, 2, 0.8, 5)
    path = tmp_path / "m.json"
    mdp.save(path)
    back = MdpSpec.load(path)
    assert np.array_equal(back.transition, mdp.transition) and np.array_equal(back.reward, mdp.reward)
    doc = mdp.to_json().replace('"gamma"', '"discount"')
    with pytest.raises(ValueError):
        MdpSpec.from_json(doc)


def test_self_loop_soft_q_is_geometric_series():
    q = exact_soft_q(self_loop(1.0, 0.9), TabularPolicy.deterministic([0], 1), 0.0)
    assert q[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_zero_reward_gives_zero_q():
    mdp = make_random_mdp(4, 2, 0.9, 3)
    mdp = MdpSpec(mdp.transition, np.zeros((4, 2)), 0.9, mdp.p0)
    assert np.all(exact_soft_q(mdp, TabularPolicy.uniform(4, 2), 0.0) == 0.0)


def test_soft_q_matches_value_iteration_oracle():
    mdp = make_random_mdp(5, 3, 0.9, seed=2)
    pi = TabularPolicy.uniform(5, 3)
    q = exact_soft_q(mdp, pi, alpha=0.1)
    oracle = value_iteration_soft_q(mdp, pi.probs, 0.1, iters=10_000)
    assert np.max(np.abs(q - oracle)) <= 1e-8


def test_zero_probability_actions_carry_no_entropy_term():
    mdp = make_random_mdp(3, 3, 0.9, 4)
    pi = TabularPolicy.deterministic([0, 2, 1], 3)
    assert np.all(np.isfinite(pi.log_probs()))
    assert np.allclose(exact_soft_q(mdp, pi, 0.5), exact_soft_q(mdp, pi, 0.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.floats(0.05, 0.995), st.floats(0.0, 2.0), st.integers(0, 10**6))
def test_soft_q_is_a_fixed_point(n_states, n_actions, gamma, alpha, seed):
    mdp = make_random_mdp(n_states, n_actions, gamma, seed)
    pi = TabularPolicy.random(n_states, n_actions, np.random.default_rng(seed))
    q = exact_soft_q(mdp, pi, alpha)
    assert np.max(np.abs(soft_bellman(mdp, pi, q, alpha) - q)) <= 1e-10


def test_negative_alpha_rejected():
    with pytest.raises(ValueError):
        exact_soft_q(self_loop(), TabularPolicy.uniform(1, 1), -0.1)


def test_sample_transition_deterministic_row_and_reward():
    P = np.zeros((3, 1, 3))
    P[:, 0, 2] = 1.0
    r = np.array([[0.25], [0.5], [0.75]])
    mdp = MdpSpec(P, r, 0.9, np.full(3, 1 / 3))
    rng = np.random.default_rng(0)
    for s in range(3):
        t = sample_transition(mdp, s, 0, rng)
        assert t.s_next == 2 and t.r == r[s, 0] and t.terminal is False


def test_sample_transition_frequencies_within_binomial_band():
    P = np.array([[[0.3, 0.7]], [[0.5, 0.5]]])
    mdp = MdpSpec(P, np.zeros((2, 1)), 0.9, np.array([1.0, 0.0]))
    rng = np.random.default_rng(1)
    n = 100_000
    hits = sum(sample_transition(mdp, 0, 0, rng).s_next == 0 for _ in range(n))
    assert abs(hits - 0.3 * n) <= 3 * binomial_sigma(n, 0.3)


def test_sample_transition_rejects_out_of_range():
    with pytest.raises(ValueError):
        sample_transition(self_loop(), 1, 0, np.random.default_rng(0))


def test_policy_entropy_uniform():
    pi = TabularPolicy.uniform(2, 4)
    assert np.allclose(pi.entropy(), math.log(4))
