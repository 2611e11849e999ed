"""Experiment orchestration: config, training loop, evaluation, metrics, sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentConfig, Learner, SacAgent
from .buffers import ReplayBuffer, route_transition
from .envs import make_env
from .mdp import NumericError
from .nn import load_blob, save_blob
from .pessimism import LOSSES, SOURCES, make_adjuster

log = logging.getLogger("pessilab")

METRIC_FIELDS = (
    "step",
    "eval_return",
    "beta",
    "alpha",
    "critic_disagreement",
    "approx_error",
    "overfit_ratio",
    "critic_loss",
    "wall_ms",
)
FINAL_WINDOW = 10


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    adjuster: dict = field(default_factory=lambda: {"name": "fixed", "beta": 1.0})
    agent: AgentConfig = field(default_factory=AgentConfig)
    total_steps: int = 50_000
    eval_every: int = 1_000
    eval_episodes: int = 5
    validation_ratio: float = 0.0
    reset_every: int = 0
    seed: int = 0
    output: str | None = None
    buffer_capacity: int | None = None
    approx_error_starts: int = 5
    approx_error_rollout: int = 200
    metric_batch: int = 256
    overfit_signed: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.agent, dict):
            try:
                self.agent = AgentConfig(**self.agent)
            except TypeError as exc:
                raise ConfigError(f"bad agent config: {exc}") from exc
        if self.total_steps < 0 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("total_steps >= 0, eval_every >= 1 and eval_episodes >= 1 are required")
        if self.total_steps % self.eval_every:
            raise ConfigError("eval_every must divide total_steps")
        if not 0.0 <= self.validation_ratio < 1.0:
            raise ConfigError("validation_ratio must lie in [0, 1)")
        if self.reset_every < 0:
            raise ConfigError("reset_every must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["agent"] = self.agent.to_dict()
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        for key, value in changes.items():
            if key.startswith("agent."):
                doc["agent"][key[len("agent.") :]] = value
            elif key.startswith("adjuster."):
                doc["adjuster"] = {**doc["adjuster"], key[len("adjuster.") :]: value}
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)


@dataclass
class MetricsRow:
    step: int
    eval_return: float = math.nan
    beta: float = math.nan
    alpha: float = math.nan
    critic_disagreement: float = math.nan
    approx_error: float = math.nan
    overfit_ratio: float = math.nan
    critic_loss: float = math.nan
    wall_ms: float = math.nan


# --- CSV ----------------------------------------------------------------------


def format_value(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    return f"{x:.9g}"


def format_row(row: MetricsRow) -> str:
    return ",".join(format_value(getattr(row, name)) for name in METRIC_FIELDS)


def write_metrics(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRIC_FIELDS) + "\n")
        for row in rows:
            fh.write(format_row(row) + "\n")


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"unexpected metrics header in {path}")
        return [
            MetricsRow(int(r["step"]), *(float(r[name]) for name in METRIC_FIELDS[1:]))
            for r in reader
        ]


# --- evaluation and metrics ------------------------------------------------------


def evaluate(policy, env, episodes: int, rng: np.random.Generator, collect: ReplayBuffer | None = None) -> float:
    """Mean undiscounted return of ``policy(obs) -> action`` over full episodes.

    When ``collect`` is given, every visited transition is stored in it.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    returns = []
    for _ in range(episodes):
        obs = env.reset(rng)
        total, done = 0.0, False
        while not done:
            action = policy(obs)
            next_obs, reward, terminal, truncated = env.step(action)
            if collect is not None:
                collect.add(obs, action, reward, next_obs, terminal)
            total += reward
            obs = next_obs
            done = terminal or truncated
        returns.append(total)
    return float(np.mean(returns))


def approx_error_metric(agent, env, n_starts: int, rollout_len: int, rng: np.random.Generator,
                        gamma: float | None = None, alpha: float | None = None) -> float:
    """Signed critic error from Monte-Carlo rollouts; positive means overestimation.

    For each start state s and a ~ pi(.|s), the reference value is
    (mean reward - alpha * mean log pi) / (1 - gamma), averaged along a rollout of
    ``rollout_len`` steps that begins with a and then follows the policy.
    """
    if n_starts < 1 or rollout_len < 1:
        raise ValueError("n_starts and rollout_len must be positive")
    gamma = agent.config.gamma if gamma is None else gamma
    alpha = agent.alpha if alpha is None else alpha
    errors = []
    for _ in range(n_starts):
        obs = env.reset(rng)
        first = agent.actor.sample(obs, rng)
        q_mu = float(agent.critics.forward(obs, first.action, 0.0).mean[0])
        action = first.action[0]
        rewards, log_probs = [], []
        for t in range(rollout_len):
            if t > 0:
                sample = agent.actor.sample(obs, rng)
                action = sample.action[0]
                log_probs.append(float(sample.log_prob[0]))
            obs, reward, terminal, _ = env.step(action)
            rewards.append(reward)
            if terminal:
                break
        mean_logp = float(np.mean(log_probs)) if log_probs else 0.0
        q_ref = (float(np.mean(rewards)) - alpha * mean_logp) / (1.0 - gamma)
        errors.append(-(q_ref - q_mu))
    return float(np.mean(errors))


def temporal_errors_lb(agent, batch, beta: float, alpha: float, gamma: float, rng) -> np.ndarray:
    """Per-transition lower-bound temporal error r + gamma V_lb(s') - Q_mean(s, a), online critics."""
    here = agent.critics.forward(batch.obs, batch.action, beta)
    nxt = agent.actor.sample(batch.next_obs, rng)
    there = agent.critics.forward(batch.next_obs, nxt.action, beta)
    not_done = 1.0 - batch.terminal.astype(float)
    return batch.reward + gamma * not_done * (there.lower_bound - alpha * nxt.log_prob) - here.mean


def overfit_ratio(val_td: np.ndarray, train_td: np.ndarray, signed: bool = False) -> float:
    if signed:
        num, den = float(np.mean(val_td)), float(np.mean(train_td))
    else:
        num, den = float(np.mean(np.square(val_td))), float(np.mean(np.square(train_td)))
    if abs(den) < 1e-12:
        return math.nan
    return num / den


def overfit_metric(agent, beta: float, alpha: float, gamma: float, train_batch, val_batch,
                   seed: int = 0, signed: bool = False) -> float:
    """Validation-to-training ratio of lower-bound TD errors (squared by default).

    Both halves draw their next-state actions from identically seeded streams, so
    equal batches give a ratio of exactly 1.
    """
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ValueError("overfit_metric needs non-empty batches")
    val_td = temporal_errors_lb(agent, val_batch, beta, alpha, gamma, np.random.default_rng(seed))
    train_td = temporal_errors_lb(agent, train_batch, beta, alpha, gamma, np.random.default_rng(seed))
    return overfit_ratio(val_td, train_td, signed)


def final_performance(rows, window: int = FINAL_WINDOW) -> float:
    returns = [r.eval_return for r in rows if not math.isnan(r.eval_return)]
    if not returns:
        return math.nan
    return float(np.mean(returns[-window:]))


def bootstrap_ci(values, n_resamples: int = 10_000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, values.size, size=(n_resamples, values.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


# --- training run -------------------------------------------------------------------


STREAMS = ("env", "explore", "routing", "sample", "policy", "adjuster", "eval", "metrics", "init")


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def run_experiment(cfg: ExperimentConfig, probe=None) -> list[MetricsRow]:
    """Train one agent; returns the evaluation rows and, if ``cfg.output`` is set,
    writes ``metrics.csv`` incrementally and a final ``checkpoint.bin``.

    ``probe``, if given, is called once at the end as ``probe(learner, eval_buffer)``.
    """
    rngs = _streams(cfg.seed)
    init_entropy = int(rngs["init"].integers(0, 2**63 - 1))
    env = make_env(cfg.env, seed=int(rngs["env"].integers(2**31)), **_env_kwargs(cfg))
    eval_env = make_env(cfg.env, seed=int(rngs["eval"].integers(2**31)), **_env_kwargs(cfg))
    acfg = cfg.agent
    agent = SacAgent(env.obs_dim, env.act_dim, acfg, seed=_derive(init_entropy, 0))
    adjuster = make_adjuster(cfg.adjuster, cfg.validation_ratio, acfg.batch_size)
    capacity = cfg.buffer_capacity or max(cfg.total_steps, 1)
    train_buf = ReplayBuffer(capacity, env.obs_dim, env.act_dim)
    val_buf = ReplayBuffer(capacity, env.obs_dim, env.act_dim)
    # transitions gathered while evaluating; used for overfitting when v = 0
    eval_buf = ReplayBuffer(capacity, env.obs_dim, env.act_dim)
    learner = Learner(agent, adjuster, train_buf, val_buf, cfg.validation_ratio, rngs["sample"], rngs["policy"])

    out_dir = Path(cfg.output) if cfg.output else None
    sink = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.csv", "w", newline="")
        sink.write(",".join(METRIC_FIELDS) + "\n")

    rows: list[MetricsRow] = []
    t0 = time.perf_counter()
    step = 0
    try:
        obs = env.reset(rngs["env"])
        adjuster.on_episode_start(rngs["adjuster"])
        episode_return = 0.0
        for step in range(1, cfg.total_steps + 1):
            if step <= acfg.initial_random_steps:
                action = rngs["explore"].uniform(-1.0, 1.0, size=env.act_dim)
            else:
                action = agent.act(obs, rngs["explore"])
            next_obs, reward, terminal, truncated = env.step(action)
            dest = route_transition(cfg.validation_ratio, rngs["routing"])
            (val_buf if dest == "validation" else train_buf).add(obs, action, reward, next_obs, terminal, step)
            adjuster.on_transition(obs, action, reward, next_obs, terminal)
            learner.env_steps = step
            learner.train_step()
            episode_return += reward
            if terminal or truncated:
                adjuster.on_episode_end(episode_return)
                adjuster.on_episode_boundary()
                obs = env.reset(rngs["env"])
                adjuster.on_episode_start(rngs["adjuster"])
                episode_return = 0.0
            else:
                obs = next_obs
            if cfg.reset_every and step % cfg.reset_every == 0 and step < cfg.total_steps:
                before = agent.critic_opt.state.step_count
                agent.reset_parameters(_derive(init_entropy, step))
                adjuster.on_reset()
                log.debug("step %d: parameter reset (critic optimiser step_count %d -> %d)",
                          step, before, agent.critic_opt.state.step_count)
            if step % cfg.eval_every == 0:
                row = _evaluation_row(cfg, step, agent, learner, eval_env, train_buf, val_buf, eval_buf, rngs)
                if cfg.record_wall_time:
                    row.wall_ms = (time.perf_counter() - t0) * 1000.0
                rows.append(row)
                if sink is not None:
                    sink.write(format_row(row) + "\n")
                    sink.flush()
    except NumericError as exc:
        if sink is not None:
            sink.write(format_row(MetricsRow(step=step)) + "\n")
        raise RunFailure(f"numeric failure during run: {exc}") from exc
    finally:
        if sink is not None:
            sink.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", agent, cfg, adjuster.beta)
    if probe is not None:
        probe(learner, eval_buf)
    return rows


def _derive(entropy: int, tag: int) -> int:
    return int(np.random.SeedSequence([entropy, tag]).generate_state(1)[0])


def _env_kwargs(cfg: ExperimentConfig) -> dict:
    return {"gamma": cfg.agent.gamma} if cfg.env.startswith("tabular") else {}


def _evaluation_row(cfg, step, agent, learner, eval_env, train_buf, val_buf, eval_buf, rngs) -> MetricsRow:
    acfg = agent.config
    greedy = lambda o: agent.act(o, None, "greedy")  # noqa: E731
    eval_return = evaluate(greedy, eval_env, cfg.eval_episodes, rngs["eval"], collect=eval_buf)
    beta = learner.adjuster.beta
    approx = approx_error_metric(agent, eval_env, cfg.approx_error_starts, cfg.approx_error_rollout, rngs["metrics"])
    source = val_buf if cfg.validation_ratio > 0 else eval_buf
    if len(train_buf) and len(source):
        seed = int(rngs["metrics"].integers(2**31))
        overfit = overfit_metric(
            agent, beta, agent.alpha, acfg.gamma,
            train_buf.sample(cfg.metric_batch, rngs["metrics"]),
            source.sample(cfg.metric_batch, rngs["metrics"]),
            seed=seed, signed=cfg.overfit_signed,
        )
    else:
        overfit = math.nan
    return MetricsRow(
        step=step,
        eval_return=eval_return,
        beta=beta,
        alpha=agent.alpha,
        critic_disagreement=learner.last.critic_disagreement,
        approx_error=approx,
        overfit_ratio=overfit,
        critic_loss=learner.last.critic_loss,
    )


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, agent: SacAgent, cfg: ExperimentConfig, beta: float) -> None:
    meta = {"config": cfg.to_dict(), "obs_dim": agent.obs_dim, "act_dim": agent.act_dim, "beta": beta}
    save_blob(path, agent.state_arrays(), meta)


def load_checkpoint(path):
    arrays, meta = load_blob(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    agent = SacAgent(meta["obs_dim"], meta["act_dim"], cfg.agent, seed=0)
    agent.load_arrays(arrays)
    return agent, cfg, meta


def evaluate_checkpoint(path, episodes: int, seed: int = 0) -> float:
    agent, cfg, _ = load_checkpoint(path)
    env = make_env(cfg.env, seed=seed, **_env_kwargs(cfg))
    return evaluate(lambda o: agent.act(o, None, "greedy"), env, episodes, np.random.default_rng(seed))


# --- sweeps -------------------------------------------------------------------------


AXES = ("validation_ratio", "pessimism_lr", "ablation_grid", "adjuster")


@dataclass
class SweepRun:
    arm: str
    value: str
    seed: int
    config: ExperimentConfig


def parse_seeds(text: str) -> list[int]:
    """'1..10' or '1,2,5'."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def plan_sweep(base: ExperimentConfig, axis: str, values, seeds) -> list[SweepRun]:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    values, seeds = list(values), list(seeds)
    if not values or not seeds:
        raise ConfigError("sweep needs at least one value and one seed")
    adj_name = base.adjuster.get("name", "fixed")
    plans = []
    for seed in seeds:
        if axis == "validation_ratio":
            # baseline (no validation buffer), regret (buffer kept, beta frozen), adjusted
            plans.append(SweepRun("baseline", "0", seed, base.replace(seed=seed, validation_ratio=0.0, **{"adjuster.frozen": True})))
            for v in values:
                v = float(v)
                if v == 0.0:
                    continue
                plans.append(SweepRun("regret", str(v), seed, base.replace(seed=seed, validation_ratio=v, **{"adjuster.frozen": True})))
                plans.append(SweepRun(adj_name, str(v), seed, base.replace(seed=seed, validation_ratio=v)))
        elif axis == "pessimism_lr":
            for lr in values:
                plans.append(SweepRun(adj_name, str(lr), seed, base.replace(seed=seed, **{"adjuster.lr": float(lr)})))
        elif axis == "adjuster":
            for name in values:
                adj = {**base.adjuster, "name": name}
                plans.append(SweepRun(name, name, seed, base.replace(seed=seed, adjuster=adj)))
        else:
            combos = [f"{l}:{s}" for l in LOSSES for s in SOURCES] if values == ["all"] else values
            for combo in combos:
                loss, source = combo.split(":")
                adj = {**base.adjuster, "name": "ablation", "loss": loss, "source": source}
                plans.append(SweepRun("ablation", combo, seed, base.replace(seed=seed, adjuster=adj)))
    return plans


def _execute(run: SweepRun) -> tuple[SweepRun, float, str | None]:
    try:
        rows = run_experiment(run.config)
        return run, final_performance(rows), None
    except Exception as exc:  # one failed run must not stop the sweep
        return run, math.nan, f"{type(exc).__name__}: {exc}"


def sweep(base: ExperimentConfig, axis: str, values, seeds, out_dir: str | Path, workers: int | None = None):
    """Run every (value, seed) combination and write ``summary.csv`` with the
    per-value mean final return and a 95% bootstrap interval over seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = plan_sweep(base, axis, values, seeds)
    for run in plans:
        run.config = run.config.replace(output=str(out_dir / f"{run.arm}_{run.value}_seed{run.seed}".replace(":", "-")))
    if workers is None:
        workers = int(os.environ.get("PESSILAB_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(plans)))
    if workers == 1:
        results = [_execute(run) for run in plans]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, plans))

    groups: dict[tuple[str, str], list] = {}
    failures = []
    for run, perf, err in results:
        groups.setdefault((run.arm, run.value), [])
        if err is None:
            groups[(run.arm, run.value)].append(perf)
        else:
            failures.append((run, err))
    summary = []
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        fh.write("arm,value,n_seeds,mean_final_return,ci_low,ci_high,n_failed\n")
        for (arm, value), perfs in groups.items():
            n_failed = sum(1 for r, _ in failures if (r.arm, r.value) == (arm, value))
            mean = float(np.mean(perfs)) if perfs else math.nan
            lo, hi = bootstrap_ci(perfs)
            summary.append({"arm": arm, "value": value, "n_seeds": len(perfs), "mean": mean, "ci": (lo, hi),
                            "n_failed": n_failed, "finals": perfs})
            fh.write(",".join([arm, value, str(len(perfs)), format_value(mean), format_value(lo),
                               format_value(hi), str(n_failed)]) + "\n")
    for run, err in failures:
        log.error("run %s/%s seed %d failed: %s", run.arm, run.value, run.seed, err)
    return summary
