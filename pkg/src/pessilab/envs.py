"""Environments for the learning experiments: a torque-limited pendulum and a
continuous-action wrapper around a finite MDP.

Both are infinite-horizon tasks cut into fixed-length episodes. Hitting the time
limit sets ``truncated`` but never ``terminal``, so TD targets keep bootstrapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import MdpSpec, NumericError


@dataclass(frozen=True)
class PendulumSpec:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    episode_length: int = 200


def wrap_angle(theta: float) -> float:
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


def pendulum_step(spec: PendulumSpec, state: tuple[float, float], u: float):
    """Advance (theta, theta_dot) by one semi-implicit Euler step under torque u.

    theta = 0 is upright (the unstable equilibrium the reward favours); theta = pi
    hangs down. Returns ``((theta, theta_dot), reward)``.
    """
    theta, theta_dot = state
    if not (math.isfinite(theta) and math.isfinite(theta_dot) and math.isfinite(u)):
        raise NumericError(f"non-finite pendulum input: state={state}, u={u}")
    u = min(max(u, -spec.max_torque), spec.max_torque)
    g, m, l, dt = spec.gravity, spec.mass, spec.length, spec.dt
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2)
    theta_dot = theta_dot + dt * (3.0 * g / (2.0 * l) * math.sin(theta) + 3.0 / (m * l**2) * u)
    theta_dot = min(max(theta_dot, -spec.max_speed), spec.max_speed)
    theta = theta + dt * theta_dot
    return (theta, theta_dot), reward


class Pendulum:
    """Pendulum swing-up with observation (cos theta, sin theta, theta_dot) and a
    single action in [-1, 1] scaled to the torque limit."""

    obs_dim = 3
    act_dim = 1

    def __init__(self, spec: PendulumSpec | None = None):
        self.spec = spec or PendulumSpec()
        self.episode_length = self.spec.episode_length
        self.state = (0.0, 0.0)
        self.t = 0

    def observe(self) -> np.ndarray:
        theta, theta_dot = self.state
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = (float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(-1.0, 1.0)))
        self.t = 0
        return self.observe()

    def get_state(self):
        return (self.state, self.t)

    def set_state(self, snapshot) -> np.ndarray:
        self.state, self.t = snapshot
        return self.observe()

    def step(self, action: np.ndarray):
        u = float(np.asarray(action).reshape(-1)[0]) * self.spec.max_torque
        self.state, reward = pendulum_step(self.spec, self.state, u)
        self.t += 1
        return self.observe(), reward, False, self.t >= self.episode_length


class TabularEnv:
    """Finite MDP exposed through one-hot observations and a scalar action in
    [-1, 1] that is binned evenly into the MDP's discrete actions.

    With ``geometric=True`` an episode stops after each step with probability
    1 - gamma, so the expected undiscounted return equals the discounted value.
    """

    act_dim = 1

    def __init__(self, mdp: MdpSpec, episode_length: int = 200, geometric: bool = False, seed: int = 0):
        self.mdp = mdp
        self.obs_dim = mdp.n_states
        self.episode_length = episode_length
        self.geometric = geometric
        self._rng = np.random.default_rng(seed)
        self.s = 0
        self.t = 0

    def action_index(self, action) -> int:
        a = float(np.asarray(action).reshape(-1)[0])
        n = self.mdp.n_actions
        return min(int((a + 1.0) / 2.0 * n), n - 1)

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.mdp.n_states)
        obs[self.s] = 1.0
        return obs

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.s = int(rng.choice(self.mdp.n_states, p=self.mdp.p0))
        self.t = 0
        return self.observe()

    def get_state(self):
        return (self.s, self.t)

    def set_state(self, snapshot) -> np.ndarray:
        self.s, self.t = snapshot
        return self.observe()

    def step(self, action):
        a = self.action_index(action)
        reward = float(self.mdp.reward[self.s, a])
        self.s = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self.s, a]))
        self.t += 1
        if self.geometric:
            truncated = bool(self._rng.random() > self.mdp.gamma)
        else:
            truncated = self.t >= self.episode_length
        return self.observe(), reward, False, truncated


def make_env(env_id: str, seed: int = 0, **kwargs):
    """Build an environment by id: ``pendulum`` or ``tabular:<S>x<A>:<mdp seed>``."""
    if env_id == "pendulum":
        return Pendulum(PendulumSpec(**kwargs))
    if env_id.startswith("tabular"):
        parts = env_id.split(":")
        n_states, n_actions, mdp_seed = 8, 3, 0
        if len(parts) > 1:
            n_states, n_actions = (int(x) for x in parts[1].split("x"))
        if len(parts) > 2:
            mdp_seed = int(parts[2])
        from .mdp import make_random_mdp

        mdp = make_random_mdp(n_states, n_actions, kwargs.pop("gamma", 0.99), mdp_seed)
        return TabularEnv(mdp, seed=seed, **kwargs)
    raise ValueError(f"unknown environment id {env_id!r}")
