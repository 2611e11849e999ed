"""MaxEnt actor-critic with generalized lower-bound targets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .buffers import Batch, ReplayBuffer, validation_batch_size
from .mdp import NumericError
from .nn import (
    Adam,
    AdamState,
    CriticEnsembleNet,
    GaussianPolicyHead,
    adam_step,
    lower_bound_member_weights,
    mlp_backward,
    polyak_update,
)
from .pessimism import Adjuster, UpdateContext

UPDATE_ORDER = ("critic", "actor", "temperature", "pessimism")


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 256
    replay_ratio: int = 2
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    initial_alpha: float = 1.0
    target_entropy: float | None = None  # None -> -act_dim / 2
    ensemble_size: int = 2
    initial_random_steps: int = 10_000
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    update_order: tuple[str, ...] = UPDATE_ORDER
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.update_order = tuple(self.update_order)
        if sorted(self.update_order) != sorted(UPDATE_ORDER):
            raise ValueError(f"update_order must be a permutation of {UPDATE_ORDER}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if min(self.batch_size, self.replay_ratio, self.ensemble_size, self.initial_random_steps) < 1:
            raise ValueError("batch_size, replay_ratio, ensemble_size and initial_random_steps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["update_order"] = list(self.update_order)
        return d


@dataclass
class TemperatureState:
    log_alpha: float
    target_entropy: float

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, config: AgentConfig, seed: int = 0):
        self.obs_dim, self.act_dim, self.config = obs_dim, act_dim, config
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Re-initialise networks, targets, temperature and optimiser state."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        self.actor = GaussianPolicyHead(self.obs_dim, self.act_dim, cfg.hidden, cfg.activation, rng, dtype=dtype)
        self.critics = CriticEnsembleNet(
            self.obs_dim, self.act_dim, cfg.ensemble_size, cfg.hidden, cfg.activation, rng, dtype=dtype
        )
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        self.critic_opt = Adam(self.critics.params, cfg.critic_lr)
        target_entropy = -self.act_dim / 2.0 if cfg.target_entropy is None else cfg.target_entropy
        self.temperature = TemperatureState(math.log(cfg.initial_alpha), target_entropy)
        self.alpha_opt = AdamState.create(1, cfg.alpha_lr)

    @property
    def alpha(self) -> float:
        return self.temperature.alpha

    def act(self, obs, rng: np.random.Generator | None, mode: str = "stochastic") -> np.ndarray:
        return self.actor.sample(obs, rng, mode).action[0]

    # -- checkpoint state -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "actor": self.actor.params.flat,
            "critics": self.critics.params.flat,
            "critic_targets": self.critics.target.flat,
            "log_alpha": np.array([self.temperature.log_alpha]),
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.actor.params.assign(arrays["actor"])
        self.critics.params.assign(arrays["critics"])
        self.critics.target.assign(arrays["critic_targets"])
        self.temperature.log_alpha = float(arrays["log_alpha"][0])


def compute_targets(batch: Batch, agent: SacAgent, beta: float, alpha: float, gamma: float, rng) -> np.ndarray:
    """y = r + gamma * (Q_lb_target(s', a') - alpha log pi(a'|s')), a' ~ pi(.|s').

    The result is a plain array, so no gradient can flow through it.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    nxt = agent.actor.sample(batch.next_obs, rng)
    out = agent.critics.forward(batch.next_obs, nxt.action, beta, use_target=True)
    not_done = 1.0 - batch.terminal.astype(float)
    return batch.reward + gamma * not_done * (out.lower_bound - alpha * nxt.log_prob)


def critic_loss_and_grad(batch: Batch, agent: SacAgent, y: np.ndarray):
    out = agent.critics.forward(batch.obs, batch.action, 0.0)
    diff = out.values - y  # (k, B)
    loss = float(np.mean(diff * diff))
    upstream = (2.0 / diff.size) * diff[..., None]
    grad = mlp_backward(out.cache, upstream)
    return loss, grad.flat, out


def critic_update(batch: Batch, agent: SacAgent, y: np.ndarray) -> tuple[float, float]:
    """One joint Adam step on all critic members, then Polyak-averaged targets.

    Returns ``(loss, batch-mean Q_std)``.
    """
    loss, grad, out = critic_loss_and_grad(batch, agent, y)
    if not math.isfinite(loss):
        raise NumericError("non-finite critic loss; step refused")
    agent.critic_opt.step(grad)
    agent.critics.target.assign(polyak_update(agent.critics.target.flat, agent.critics.params.flat, agent.config.tau))
    return loss, float(np.mean(out.std))


def actor_loss_and_grad(batch: Batch, agent: SacAgent, alpha: float, beta: float, rng):
    """Loss mean(alpha log pi(a|s) - Q_lb(s, a)) with a = tanh(mean + std * eps)."""
    sample = agent.actor.sample(batch.obs, rng)
    out = agent.critics.forward(batch.obs, sample.action, beta)
    B = sample.log_prob.shape[0]
    loss = float(np.mean(alpha * sample.log_prob - out.lower_bound))
    weights = lower_bound_member_weights(out.values, beta)  # (k, B)
    d_input = agent.critics.input_grad(out, -weights / B)
    d_action = d_input.sum(axis=0)[:, agent.obs_dim :]
    grad = agent.actor.backward(sample, d_action, np.full(B, alpha / B))
    return loss, grad


def actor_update(batch: Batch, agent: SacAgent, alpha: float, beta: float, rng) -> float:
    """One Adam step on the actor only; critic parameters are read, never written."""
    loss, grad = actor_loss_and_grad(batch, agent, alpha, beta, rng)
    if not math.isfinite(loss):
        raise NumericError("non-finite actor loss")
    agent.actor_opt.step(grad)
    return loss


def temperature_gradient(log_prob: np.ndarray, log_alpha: float, target_entropy: float) -> float:
    """d/d(log alpha) of mean(alpha * (-log pi - H*))."""
    return math.exp(log_alpha) * float(np.mean(-np.asarray(log_prob, dtype=float) - target_entropy))


def temperature_update(batch: Batch, agent: SacAgent, rng) -> float:
    """Adam step on log alpha for the loss alpha * (-log pi(a|s) - H*) on fresh actions."""
    sample = agent.actor.sample(batch.obs, rng)
    temp = agent.temperature
    grad = temperature_gradient(sample.log_prob, temp.log_alpha, temp.target_entropy)
    agent.alpha_opt, new = adam_step(agent.alpha_opt, np.array([temp.log_alpha]), np.array([grad]))
    temp.log_alpha = float(new[0])
    return temp.alpha


@dataclass
class StepReport:
    updates: int = 0
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    alpha: float = float("nan")
    beta: float = float("nan")
    critic_disagreement: float = float("nan")
    pessimism_skipped: int = 0


@dataclass
class Learner:
    """Buffers, agent, adjuster and RNG streams for one training run."""

    agent: SacAgent
    adjuster: Adjuster
    train_buffer: ReplayBuffer
    validation_buffer: ReplayBuffer
    validation_ratio: float
    sample_rng: np.random.Generator
    policy_rng: np.random.Generator
    env_steps: int = 0
    last: StepReport = field(default_factory=StepReport)

    def ready(self) -> bool:
        cfg = self.agent.config
        if self.env_steps < cfg.initial_random_steps or len(self.train_buffer) < cfg.batch_size:
            return False
        if self.validation_ratio > 0 and len(self.validation_buffer) < validation_batch_size(self.validation_ratio, cfg.batch_size):
            return False
        return True

    def update_iteration(self, report: StepReport) -> None:
        agent, cfg = self.agent, self.agent.config
        batch = self.train_buffer.sample(cfg.batch_size, self.sample_rng)
        state = self.adjuster.state
        for phase in cfg.update_order:
            if phase == "critic":
                y = compute_targets(batch, agent, state.beta, agent.alpha, cfg.gamma, self.policy_rng)
                report.critic_loss, report.critic_disagreement = critic_update(batch, agent, y)
            elif phase == "actor":
                report.actor_loss = actor_update(batch, agent, agent.alpha, state.beta, self.policy_rng)
            elif phase == "temperature":
                report.alpha = temperature_update(batch, agent, self.policy_rng)
            else:
                ctx = UpdateContext(agent, batch, self.validation_buffer, self.policy_rng)
                if self.adjuster.update(ctx).get("skipped"):
                    report.pessimism_skipped += 1
        report.beta = state.beta
        report.updates += 1

    def train_step(self) -> StepReport:
        """Run ``replay_ratio`` update iterations if warm-up is over."""
        report = StepReport(alpha=self.agent.alpha, beta=self.adjuster.state.beta)
        if self.ready():
            for _ in range(self.agent.config.replay_ratio):
                self.update_iteration(report)
            self.last = report
        return report
