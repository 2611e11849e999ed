import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pessilab.envs import Pendulum, PendulumSpec, TabularEnv, make_env, pendulum_step, wrap_angle
from pessilab.mdp import NumericError, make_random_mdp

SPEC = PendulumSpec()


def reference_step(theta, theta_dot, u, g=10.0, m=1.0, l=1.0, dt=0.05, max_speed=8.0):
    """Straight-line re-implementation of the semi-implicit Euler update."""
    acc = 1.5 * g / l * math.sin(theta) + 3.0 * u / (m * l * l)
    new_dot = max(-max_speed, min(max_speed, theta_dot + dt * acc))
    return theta + dt * new_dot, new_dot


def energy(theta, theta_dot, g=10.0, m=1.0, l=1.0):
    # rod about its pivot, theta = 0 upright
    return 0.5 * (m * l * l / 3.0) * theta_dot**2 + m * g * (l / 2.0) * math.cos(theta)


@pytest.mark.parametrize("theta", [0.0, math.pi])
def test_equilibria_stay_put(theta):
    (th, thd), _ = pendulum_step(SPEC, (theta, 0.0), 0.0)
    assert abs(th - theta) <= 1e-12 and abs(thd) <= 1e-12


def test_torque_is_clamped():
    a = pendulum_step(SPEC, (0.4, 0.3), 2.0)
    b = pendulum_step(SPEC, (0.4, 0.3), 50.0)
    assert a == b


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-8, 8))
def test_one_step_energy_matches_reference_integrator(theta, theta_dot):
    (th, thd), _ = pendulum_step(SPEC, (theta, theta_dot), 0.0)
    ref = reference_step(theta, theta_dot, 0.0)
    assert abs(energy(th, thd) - energy(*ref)) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-8, 8), st.floats(-5, 5))
def test_reward_non_positive_and_obs_on_circle(theta, theta_dot, u):
    (th, _), r = pendulum_step(SPEC, (theta, theta_dot), u)
    assert r <= 0.0
    assert abs(math.cos(th) ** 2 + math.sin(th) ** 2 - 1.0) <= 1e-9
    assert -math.pi <= wrap_angle(theta) < math.pi


def test_non_finite_state_raises():
    with pytest.raises(NumericError):
        pendulum_step(SPEC, (math.nan, 0.0), 0.0)


def test_pendulum_episode_truncates_without_terminal():
    env = Pendulum()
    env.reset(np.random.default_rng(0))
    flags = [env.step(np.zeros(1))[2:] for _ in range(200)]
    assert all(term is False for term, _ in flags)
    assert [trunc for _, trunc in flags].index(True) == 199


def test_tabular_action_binning_covers_all_actions():
    env = TabularEnv(make_random_mdp(2, 4, 0.9, 0))
    assert [env.action_index(a) for a in (-1.0, -0.6, -0.1, 0.2, 0.6, 1.0)] == [0, 0, 1, 2, 3, 3]


def test_make_env_ids():
    assert isinstance(make_env("pendulum"), Pendulum)
    env = make_env("tabular:4x2:3", seed=1, gamma=0.9)
    assert env.obs_dim == 4 and env.mdp.n_actions == 2 and env.mdp.gamma == 0.9
    with pytest.raises(ValueError):
        make_env("cartpole")
