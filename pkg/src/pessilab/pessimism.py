"""Online pessimism adjustment.

All adjusters share one ``PessimismState`` holding the scalar beta used to form
lower-bound values ``Q_mean - beta * Q_std``. The gradient rules come in two
forms:

* dual: beta <- beta - lr * mean(Q_hat - r - gamma V_lb(s')), residual detached;
* vpl:  beta <- beta - lr * d/dbeta mean((Q_mean - r - gamma V_lb(s'))^2),
  with the gradient flowing through V_lb, so the step scales with Q_std(s', a').

A data source (replay, validation or recent on-policy window) is composed with
one of the two forms. GPL, VPL and OPL are three points of that grid.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .buffers import Batch, validation_batch_size

LOSSES = ("dual", "vpl")
SOURCES = ("replay", "validation", "online")


@dataclass
class PessimismState:
    beta: float = 1.0
    pessimism_lr: float = 5e-5
    allow_negative: bool = False

    def apply_gradient(self, grad: float) -> float:
        beta = self.beta - self.pessimism_lr * grad
        self.beta = beta if self.allow_negative else max(0.0, beta)
        return self.beta


# --- update rules on frozen quantities -------------------------------------


def vpl_residual(q_mean, reward, gamma, q_mean_next, q_std_next, alpha_logp_next, beta, not_done=1.0):
    v_lb_next = q_mean_next - beta * q_std_next - alpha_logp_next
    return q_mean - reward - gamma * not_done * v_lb_next


def vpl_loss(q_mean, reward, gamma, q_mean_next, q_std_next, alpha_logp_next, beta, not_done=1.0) -> float:
    delta = vpl_residual(q_mean, reward, gamma, q_mean_next, q_std_next, alpha_logp_next, beta, not_done)
    return float(np.mean(delta**2))


def vpl_gradient(q_mean, reward, gamma, q_mean_next, q_std_next, alpha_logp_next, beta, not_done=1.0) -> float:
    """Exact d/dbeta of ``vpl_loss``: mean(2 * delta * gamma * Q_std(s', a'))."""
    delta = vpl_residual(q_mean, reward, gamma, q_mean_next, q_std_next, alpha_logp_next, beta, not_done)
    return float(np.mean(2.0 * delta * gamma * not_done * q_std_next))


def dual_gradient(q_hat, reward, gamma, v_lb_next, not_done=1.0) -> float:
    """Detached residual mean(Q_hat - r - gamma V_lb(s')); independent of Q_std."""
    return float(np.mean(q_hat - reward - gamma * not_done * v_lb_next))


def lambda_returns(rewards, v_lb_next, gamma: float, lam: float, bonus=None) -> np.ndarray:
    """Truncated TD(lambda) returns over one contiguous window.

    ``v_lb_next[t]`` is the bootstrap value V_lb(s_{t+1}); ``bonus[t]`` is the
    soft entropy bonus -alpha log pi(a_t|s_t) credited when the return passes
    through step t > 0. The last entry falls back to its one-step target.
    """
    rewards = np.asarray(rewards, dtype=float)
    v_lb_next = np.asarray(v_lb_next, dtype=float)
    bonus = np.zeros_like(rewards) if bonus is None else np.asarray(bonus, dtype=float)
    n = rewards.size
    out = np.empty(n)
    out[n - 1] = rewards[n - 1] + gamma * v_lb_next[n - 1]
    for t in range(n - 2, -1, -1):
        out[t] = rewards[t] + gamma * ((1.0 - lam) * v_lb_next[t] + lam * (bonus[t + 1] + out[t + 1]))
    return out


# --- adjusters --------------------------------------------------------------


@dataclass
class OplState:
    length: int = 8
    lam: float = 0.95
    window: deque = field(default_factory=deque)

    def push(self, obs, action, reward, next_obs, terminal) -> None:
        self.window.append((np.array(obs), np.array(action), float(reward), np.array(next_obs), bool(terminal)))
        while len(self.window) > self.length:
            self.window.popleft()

    def clear(self) -> None:
        self.window.clear()

    def as_batch(self) -> Batch:
        obs, act, rew, nxt, term = zip(*self.window)
        n = len(rew)
        return Batch(np.stack(obs), np.stack(act), np.array(rew), np.stack(nxt), np.array(term), np.arange(n))


@dataclass
class UpdateContext:
    """What an adjuster may read during one update iteration."""

    agent: object
    train_batch: Batch | None
    validation_buffer: object
    rng: np.random.Generator


class Adjuster:
    name = "base"
    needs_validation = False

    def __init__(self, state: PessimismState):
        self.state = state
        self.frozen = False

    @property
    def beta(self) -> float:
        return self.state.beta

    def update(self, ctx: UpdateContext) -> dict:
        return {"skipped": True}

    def on_episode_start(self, rng: np.random.Generator) -> None:
        pass

    def on_episode_end(self, episode_return: float) -> None:
        pass

    def on_transition(self, obs, action, reward, next_obs, terminal) -> None:
        pass

    def on_episode_boundary(self) -> None:
        pass

    def on_reset(self) -> None:
        pass


class FixedAdjuster(Adjuster):
    name = "fixed"


def _next_value_terms(agent, batch: Batch, beta: float, rng: np.random.Generator):
    """Online-critic statistics at (s, a) and at (s', a'), a' ~ pi(.|s')."""
    here = agent.critics.forward(batch.obs, batch.action, beta)
    nxt = agent.actor.sample(batch.next_obs, rng)
    there = agent.critics.forward(batch.next_obs, nxt.action, beta)
    alpha_logp = agent.alpha * nxt.log_prob
    return here, there, alpha_logp


class LossAdjuster(Adjuster):
    """One pessimism loss form applied to one data source."""

    def __init__(self, state: PessimismState, loss: str, source: str, validation_ratio: float = 1 / 32,
                 batch_size: int = 256, window_length: int = 8, lam: float = 0.95):
        super().__init__(state)
        if loss not in LOSSES or source not in SOURCES:
            raise ValueError(f"invalid ablation combination ({loss}, {source})")
        self.loss, self.source = loss, source
        self.needs_validation = source == "validation"
        self.val_batch = validation_batch_size(validation_ratio, batch_size)
        self.opl = OplState(window_length, lam) if source == "online" else None
        self.name = {("vpl", "validation"): "vpl", ("dual", "replay"): "gpl", ("dual", "online"): "opl"}.get(
            (loss, source), f"{loss}-{source}"
        )

    def _batch(self, ctx: UpdateContext) -> Batch | None:
        if self.source == "replay":
            return ctx.train_batch
        if self.source == "validation":
            buf = ctx.validation_buffer
            if buf is None or len(buf) < self.val_batch:
                return None
            return buf.sample(self.val_batch, ctx.rng)
        if not self.opl.window:
            return None
        return self.opl.as_batch()

    def update(self, ctx: UpdateContext) -> dict:
        if self.frozen:
            return {"skipped": True}
        batch = self._batch(ctx)
        if batch is None:
            return {"skipped": True}
        agent, beta = ctx.agent, self.state.beta
        gamma = agent.config.gamma
        not_done = 1.0 - batch.terminal.astype(float)
        here, there, alpha_logp = _next_value_terms(agent, batch, beta, ctx.rng)
        if self.loss == "vpl":
            grad = vpl_gradient(here.mean, batch.reward, gamma, there.mean, there.std, alpha_logp, beta, not_done)
        else:
            v_lb_next = there.lower_bound - alpha_logp
            if self.source == "online":
                bonus = -agent.alpha * agent.actor.log_prob(batch.obs, batch.action)
                q_hat = lambda_returns(batch.reward, not_done * v_lb_next, gamma, self.opl.lam, bonus)
            else:
                q_hat = here.mean
            grad = dual_gradient(q_hat, batch.reward, gamma, v_lb_next, not_done)
        self.state.apply_gradient(grad)
        return {"skipped": False, "grad": grad}

    def on_transition(self, obs, action, reward, next_obs, terminal) -> None:
        if self.opl is not None:
            self.opl.push(obs, action, reward, next_obs, terminal)

    def on_episode_boundary(self) -> None:
        if self.opl is not None:
            self.opl.clear()

    def on_reset(self) -> None:
        self.on_episode_boundary()


def vpl_adjuster(state, **kw) -> LossAdjuster:
    return LossAdjuster(state, "vpl", "validation", **kw)


def gpl_adjuster(state, **kw) -> LossAdjuster:
    return LossAdjuster(state, "dual", "replay", **kw)


def opl_adjuster(state, **kw) -> LossAdjuster:
    return LossAdjuster(state, "dual", "online", **kw)


@dataclass
class TopBanditState:
    bandit_lr: float = 0.1
    temperature: float = 1.0
    arms: tuple[float, float] = (0.0, 1.0)
    arm_values: np.ndarray = field(default_factory=lambda: np.zeros(2))
    current_arm: int | None = None
    ret_min: float = np.inf
    ret_max: float = -np.inf


def top_select(bandit: TopBanditState, rng: np.random.Generator) -> float:
    """Pick an arm from a softmax over the arm values (unit temperature by default)."""
    logits = (bandit.arm_values - bandit.arm_values.max()) / bandit.temperature
    probs = np.exp(logits) / np.exp(logits).sum()
    bandit.current_arm = int(rng.random() >= probs[0])
    return bandit.arms[bandit.current_arm]


def top_update(bandit: TopBanditState, episode_return: float) -> TopBanditState:
    """EMA update of the selected arm toward the min-max normalised return."""
    if bandit.current_arm is None:
        raise RuntimeError("top_update called before an arm was selected")
    bandit.ret_min = min(bandit.ret_min, episode_return)
    bandit.ret_max = max(bandit.ret_max, episode_return)
    span = bandit.ret_max - bandit.ret_min
    normalized = 0.5 if span <= 0 else (episode_return - bandit.ret_min) / span
    i = bandit.current_arm
    bandit.arm_values[i] = (1.0 - bandit.bandit_lr) * bandit.arm_values[i] + bandit.bandit_lr * normalized
    bandit.current_arm = None
    return bandit


class TopAdjuster(Adjuster):
    name = "top"

    def __init__(self, state: PessimismState, bandit_lr: float = 0.1, temperature: float = 1.0):
        super().__init__(state)
        if temperature <= 0:
            raise ValueError("bandit temperature must be positive")
        self.bandit = TopBanditState(bandit_lr, temperature)

    def on_episode_start(self, rng: np.random.Generator) -> None:
        if not self.frozen:
            self.state.beta = top_select(self.bandit, rng)

    def on_episode_end(self, episode_return: float) -> None:
        if not self.frozen and self.bandit.current_arm is not None:
            top_update(self.bandit, episode_return)


ADJUSTER_KEYS = {"name", "beta", "lr", "frozen", "loss", "source", "lam", "window", "bandit_lr", "bandit_temperature", "allow_negative_beta"}


def make_adjuster(spec: dict, validation_ratio: float, batch_size: int) -> Adjuster:
    """Build an adjuster from a config mapping such as ``{"name": "vpl", "lr": 5e-4}``."""
    unknown = set(spec) - ADJUSTER_KEYS
    if unknown:
        raise ValueError(f"unknown adjuster keys: {sorted(unknown)}")
    name = spec.get("name", "fixed")
    state = PessimismState(spec.get("beta", 1.0), spec.get("lr", 5e-5), spec.get("allow_negative_beta", False))
    kw = {"validation_ratio": validation_ratio if validation_ratio > 0 else 1 / 32, "batch_size": batch_size,
          "window_length": spec.get("window", 8), "lam": spec.get("lam", 0.95)}
    if name == "fixed":
        adj = FixedAdjuster(state)
    elif name == "vpl":
        adj = vpl_adjuster(state, **kw)
    elif name == "gpl":
        adj = gpl_adjuster(state, **kw)
    elif name == "opl":
        adj = opl_adjuster(state, **kw)
    elif name == "top":
        adj = TopAdjuster(state, spec.get("bandit_lr", 0.1), spec.get("bandit_temperature", 1.0))
    elif name == "ablation":
        if "loss" not in spec or "source" not in spec:
            raise ValueError("ablation adjuster needs 'loss' and 'source' keys")
        adj = LossAdjuster(state, spec["loss"], spec["source"], **kw)
    else:
        raise ValueError(f"unknown adjuster {name!r}")
    adj.frozen = bool(spec.get("frozen", False))
    return adj
