"""Finite MDPs with exact soft policy evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite or out-of-tolerance values."""


@dataclass(frozen=True)
class MdpSpec:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    p0: np.ndarray  # (S,)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match transition {P.shape}")
        if p0.shape != (P.shape[0],):
            raise ValueError(f"p0 shape {p0.shape} does not match {P.shape[0]} states")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be non-negative and sum to 1")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > ROW_TOL:
            raise ValueError("p0 must be a probability vector")
        for name, arr in (("transition", P), ("reward", r), ("p0", p0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "gamma": self.gamma,
                "p0": self.p0.tolist(),
                "reward": self.reward.tolist(),
                "transition": self.transition.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MdpSpec":
        doc = json.loads(text)
        expected = {"n_states", "n_actions", "gamma", "p0", "reward", "transition"}
        if set(doc) != expected:
            raise ValueError(f"MDP document keys must be {sorted(expected)}, got {sorted(doc)}")
        mdp = cls(
            transition=np.array(doc["transition"], dtype=float),
            reward=np.array(doc["reward"], dtype=float),
            gamma=doc["gamma"],
            p0=np.array(doc["p0"], dtype=float),
        )
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("declared sizes disagree with tensor shapes")
        return mdp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MdpSpec":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("policy must be a (S, A) matrix")
        if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        return cls(rng.dirichlet(np.ones(n_actions), size=n_states))

    def log_probs(self) -> np.ndarray:
        """log pi with 0 log 0 := 0, i.e. zero wherever pi vanishes."""
        out = np.zeros_like(self.probs)
        np.log(self.probs, out=out, where=self.probs > 0)
        return out

    def entropy(self) -> np.ndarray:
        return -(self.probs * self.log_probs()).sum(axis=1)


@dataclass(frozen=True)
class Transition:
    s: object
    a: object
    r: float
    s_next: object
    terminal: bool = False


def make_random_mdp(n_states: int, n_actions: int, gamma: float, seed: int) -> MdpSpec:
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    # renormalise so rows sum to 1 to machine precision
    P /= P.sum(axis=2, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return MdpSpec(transition=P, reward=reward, gamma=gamma, p0=np.full(n_states, 1.0 / n_states))


def expected_next(mdp: MdpSpec, pi: TabularPolicy, field: np.ndarray) -> np.ndarray:
    """E_{s'~P(.|s,a), a'~pi(.|s')} field(s', a') for every (s, a)."""
    return mdp.transition @ (pi.probs * field).sum(axis=1)


def soft_bellman(mdp: MdpSpec, pi: TabularPolicy, q: np.ndarray, alpha: float) -> np.ndarray:
    """One application of the soft policy-evaluation operator."""
    soft_v = (pi.probs * (q - alpha * pi.log_probs())).sum(axis=1)
    return mdp.reward + mdp.gamma * mdp.transition @ soft_v


def exact_soft_q(mdp: MdpSpec, pi: TabularPolicy, alpha: float = 0.0) -> np.ndarray:
    """Solve the soft Bellman equation for Q^pi by a direct linear solve."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    S, A = mdp.n_states, mdp.n_actions
    if pi.probs.shape != (S, A):
        raise ValueError(f"policy shape {pi.probs.shape} does not match MDP ({S}, {A})")
    P = mdp.transition.reshape(S * A, S)
    # Pi[s', (s', a')] = pi(a'|s')
    Pi = np.zeros((S, S * A))
    Pi[np.repeat(np.arange(S), A), np.arange(S * A)] = pi.probs.ravel()
    lhs = np.eye(S * A) - mdp.gamma * P @ Pi
    rhs = mdp.reward.ravel() + mdp.gamma * alpha * P @ pi.entropy()
    q = np.linalg.solve(lhs, rhs).reshape(S, A)
    residual = np.max(np.abs(soft_bellman(mdp, pi, q, alpha) - q))
    if not np.isfinite(residual) or residual > RESIDUAL_TOL:
        raise NumericError(f"soft Bellman residual {residual:.3e} exceeds tolerance")
    return q


def sample_transition(mdp: MdpSpec, s: int, a: int, rng: np.random.Generator) -> Transition:
    if not (0 <= s < mdp.n_states and 0 <= a < mdp.n_actions):
        raise ValueError(f"state/action ({s}, {a}) out of range")
    s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
    return Transition(s=s, a=a, r=float(mdp.reward[s, a]), s_next=s_next, terminal=False)
