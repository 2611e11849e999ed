"""Replay storage and the training/validation routing rule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return self.reward.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions stored column-wise.

    Every record carries a global id so that buffer membership can be audited.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, obs, action, reward: float, next_obs, terminal: bool, record_id: int = -1) -> None:
        i = self.inserted % self.capacity
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        self.ids[i] = record_id
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self), size=batch_size)
        return self.gather(idx)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.terminal[idx], self.ids[idx])

    def stored_ids(self) -> np.ndarray:
        return self.ids[: len(self)].copy()


def route_transition(v: float, rng: np.random.Generator) -> str:
    """Draw p ~ U(0, 1); p <= v sends the transition to validation.

    One uniform is always consumed, whatever v is, so the routing stream stays
    aligned across runs that differ only in v.
    """
    if not 0.0 <= v < 1.0:
        raise ValueError("validation ratio must lie in [0, 1)")
    p = rng.random()
    return "validation" if v > 0.0 and p <= v else "training"


def validation_batch_size(v: float, batch_size: int) -> int:
    return max(1, math.ceil(v * batch_size))
