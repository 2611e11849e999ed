"""Exact approximation-error calculus for critic ensembles on finite MDPs.

Everything here works in expectation form: next-state terms are averaged over
P(s'|s,a) and pi(a'|s') rather than sampled, so every fixed point is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .mdp import MdpSpec, TabularPolicy, exact_soft_q, expected_next

Variant = Literal["mean", "lower_bound"]

FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITERS = 100_000


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class CertificateFailure(AssertionError):
    pass


@dataclass(frozen=True)
class EnsembleTable:
    members: tuple[np.ndarray, ...]

    def __post_init__(self):
        members = tuple(np.asarray(m, dtype=float) for m in self.members)
        if not members:
            raise ValueError("ensemble needs at least one member")
        if any(m.shape != members[0].shape or m.ndim != 2 for m in members):
            raise ValueError("ensemble members must share one (S, A) shape")
        object.__setattr__(self, "members", members)

    @property
    def k(self) -> int:
        return len(self.members)

    @classmethod
    def replicate(cls, q: np.ndarray, k: int) -> "EnsembleTable":
        return cls(tuple(np.array(q, dtype=float) for _ in range(k)))


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    std: np.ndarray
    lower_bound: np.ndarray
    beta: float


@dataclass(frozen=True)
class TemporalErrorTable:
    u_mean: np.ndarray
    u_lb: np.ndarray


def ensemble_stats(ensemble: EnsembleTable, beta: float) -> EnsembleStats:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    stacked = np.stack(ensemble.members)
    # where every member agrees the mean is that value exactly, so std is exactly 0
    mean = np.where(np.all(stacked == stacked[0], axis=0), stacked[0], stacked.mean(axis=0))
    # population std (divide by k): beta=1 then reproduces min(Q1, Q2) for k=2
    std = np.sqrt(((stacked - mean) ** 2).mean(axis=0))
    return EnsembleStats(mean=mean, std=std, lower_bound=mean - beta * std, beta=beta)


def _soft_value(q: np.ndarray, pi: TabularPolicy, alpha: float) -> np.ndarray:
    return (pi.probs * (q - alpha * pi.log_probs())).sum(axis=1)


def temporal_errors(
    mdp: MdpSpec, pi: TabularPolicy, ensemble: EnsembleTable, beta: float, alpha: float = 0.0
) -> TemporalErrorTable:
    stats = ensemble_stats(ensemble, beta)
    if stats.mean.shape != (mdp.n_states, mdp.n_actions) or pi.probs.shape != stats.mean.shape:
        raise ValueError("ensemble, policy and MDP shapes disagree")
    v_mean = _soft_value(stats.mean, pi, alpha)
    v_lb = _soft_value(stats.lower_bound, pi, alpha)
    P, r, g = mdp.transition, mdp.reward, mdp.gamma
    return TemporalErrorTable(
        u_mean=r + g * P @ v_mean - stats.mean,
        u_lb=r + g * P @ v_lb - stats.mean,
    )


def apply_error_operator(
    f: np.ndarray,
    temporal: TemporalErrorTable,
    stats: EnsembleStats,
    mdp: MdpSpec,
    pi: TabularPolicy,
    variant: Variant,
    beta: float,
) -> np.ndarray:
    """One exact application of the mean or lower-bound error operator to f."""
    f = np.asarray(f, dtype=float)
    if f.shape != temporal.u_mean.shape:
        raise ValueError(f"field shape {f.shape} does not match {temporal.u_mean.shape}")
    bootstrap = mdp.gamma * expected_next(mdp, pi, f)
    if variant == "mean":
        return temporal.u_mean + bootstrap
    if variant == "lower_bound":
        if beta < 0:
            raise ValueError("beta must be non-negative")
        return temporal.u_lb + beta * stats.std + bootstrap
    raise ValueError(f"unknown operator variant {variant!r}")


@dataclass
class ErrorOperator:
    """An error operator bound to a fixed MDP, policy, ensemble and pessimism."""

    mdp: MdpSpec
    pi: TabularPolicy
    ensemble: EnsembleTable
    beta: float
    alpha: float = 0.0
    variant: Variant = "mean"
    stats: EnsembleStats = field(init=False)
    temporal: TemporalErrorTable = field(init=False)

    def __post_init__(self):
        self.stats = ensemble_stats(self.ensemble, self.beta)
        self.temporal = temporal_errors(self.mdp, self.pi, self.ensemble, self.beta, self.alpha)

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    @property
    def shape(self) -> tuple[int, int]:
        return (self.mdp.n_states, self.mdp.n_actions)

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return apply_error_operator(f, self.temporal, self.stats, self.mdp, self.pi, self.variant, self.beta)

    def direct_error(self) -> np.ndarray:
        """Q^pi minus the ensemble estimate this operator's fixed point should match."""
        q = exact_soft_q(self.mdp, self.pi, self.alpha)
        target = self.stats.mean if self.variant == "mean" else self.stats.lower_bound
        return q - target


def fixed_point_iterate(
    start: np.ndarray,
    op: ErrorOperator,
    tol: float = FIXED_POINT_TOL,
    max_iters: int = FIXED_POINT_MAX_ITERS,
):
    """Iterate ``op`` from ``start`` until the returned field is within tol of the fixed point.

    For a gamma-contraction the last step bounds the remaining distance:
    ||f_t - f*|| <= gamma / (1 - gamma) * ||f_t - f_{t-1}||, so that bound is the
    stopping test. Returns ``(field, iterations, final_residual)`` where the
    residual is the last step size.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = op.gamma
    f = np.asarray(start, dtype=float)
    residual = np.inf
    for it in range(1, max_iters + 1):
        nxt = op(f)
        residual = float(np.max(np.abs(nxt - f)))
        f = nxt
        if gamma / (1.0 - gamma) * residual <= tol:
            return f, it, residual
    raise ConvergenceError(
        f"no convergence after {max_iters} iterations (residual {residual:.3e})", residual, max_iters
    )


def solve_fixed_point(op: ErrorOperator) -> np.ndarray:
    """Fixed point of ``op`` by one dense linear solve of (I - gamma P Pi) f = op(0)."""
    S, A = op.shape
    transfer = op.mdp.transition.reshape(S * A, S)[:, :, None] * op.pi.probs[None, :, :]
    system = np.eye(S * A) - op.gamma * transfer.reshape(S * A, S * A)
    offset = op(np.zeros((S, A)))
    return np.linalg.solve(system, offset.ravel()).reshape(S, A)


@dataclass
class ContractionReport:
    trials: int
    max_ratio: float
    gamma: float
    monotone: bool
    monotone_violations: int

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max_ratio": self.max_ratio,
            "gamma": self.gamma,
            "monotone": self.monotone,
            "monotone_violations": self.monotone_violations,
        }


def contraction_certificate(
    op: ErrorOperator, n_trials: int, rng: np.random.Generator, low: float = -10.0, high: float = 10.0
) -> ContractionReport:
    """Check ||U f1 - U f2||_inf <= gamma ||f1 - f2||_inf on random field pairs.

    Monotonicity (f1 <= f2 implies U f1 <= U f2) is tested on a separate set of
    ordered pairs and reported without affecting the contraction verdict.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    gamma = op.gamma
    max_ratio = 0.0
    violations = 0
    for trial in range(n_trials):
        f1 = rng.uniform(low, high, size=op.shape)
        f2 = rng.uniform(low, high, size=op.shape)
        lhs = float(np.max(np.abs(op(f1) - op(f2))))
        dist = float(np.max(np.abs(f1 - f2)))
        if lhs > gamma * dist + 1e-9:
            raise CertificateFailure(
                f"trial {trial}: ||U f1 - U f2|| = {lhs:.6g} > gamma * {dist:.6g}; f1={f1.tolist()}, f2={f2.tolist()}"
            )
        if dist > 0:
            max_ratio = max(max_ratio, lhs / dist)

        g1 = rng.uniform(low, high, size=op.shape)
        g2 = g1 + rng.uniform(0.0, high - low, size=op.shape)
        if np.any(op(g1) > op(g2) + 1e-12):
            violations += 1
    return ContractionReport(n_trials, max_ratio, gamma, violations == 0, violations)


@dataclass
class ZeroErrorResult:
    holds: bool
    witnesses: list[dict]
    underestimation_holds: bool
    underestimation_violations: list[dict]


def zero_error_check(
    mdp: MdpSpec,
    pi: TabularPolicy,
    ensemble: EnsembleTable,
    beta: float,
    alpha: float = 0.0,
    tol: float = 1e-9,
    max_witnesses: int = 10,
) -> ZeroErrorResult:
    """Check the two zero-error conditions and the underestimation inequality.

    Both approximation errors vanish iff the ensemble mean satisfies its own soft
    Bellman equation and beta * Q^sigma is zero everywhere. Separately, wherever
    the mean error is positive (underestimation) and beta > 0, the lower-bound
    error must be at least as large in magnitude.
    """
    stats = ensemble_stats(ensemble, beta)
    temporal = temporal_errors(mdp, pi, ensemble, beta, alpha)
    bellman_gap = np.abs(temporal.u_mean)
    pess_gap = np.abs(beta * stats.std)
    bad = np.maximum(bellman_gap, pess_gap)
    order = np.argsort(-bad, axis=None)
    witnesses = []
    for flat in order[:max_witnesses]:
        s, a = np.unravel_index(flat, bad.shape)
        if bad[s, a] <= tol:
            break
        witnesses.append(
            {"s": int(s), "a": int(a), "bellman_gap": float(bellman_gap[s, a]), "pessimism_gap": float(pess_gap[s, a])}
        )

    q = exact_soft_q(mdp, pi, alpha)
    u_mean = q - stats.mean
    u_lb = q - stats.lower_bound
    under = []
    if beta > 0:
        for s, a in zip(*np.nonzero(u_mean > 0)):
            if abs(u_mean[s, a]) > abs(u_lb[s, a]):
                under.append({"s": int(s), "a": int(a), "U_mean": float(u_mean[s, a]), "U_lb": float(u_lb[s, a])})
    return ZeroErrorResult(
        holds=not witnesses,
        witnesses=witnesses,
        underestimation_holds=not under,
        underestimation_violations=under[:max_witnesses],
    )


def random_ensemble(q_shape, k: int, rng: np.random.Generator, scale: float = 10.0) -> EnsembleTable:
    return EnsembleTable(tuple(rng.uniform(0.0, scale, size=q_shape) for _ in range(k)))


def verify_mdp(mdp: MdpSpec, seed: int, trials: int, ks=(2, 4), beta: float | None = None, alpha: float = 0.1) -> dict:
    """Run every error-operator certificate on one MDP and return a JSON-ready report."""
    rng = np.random.default_rng(seed)
    shape = (mdp.n_states, mdp.n_actions)
    pi = TabularPolicy.random(mdp.n_states, mdp.n_actions, rng)
    q_true = exact_soft_q(mdp, pi, alpha)
    shift_gap = fp_gap = ratio = 0.0
    monotone = True
    for k in ks:
        ens = random_ensemble(shape, k, rng, scale=float(np.max(np.abs(q_true))) * 2 + 1.0)
        b = float(rng.uniform(0.0, 2.0)) if beta is None else beta
        mean_op = ErrorOperator(mdp, pi, ens, b, alpha, "mean")
        lb_op = ErrorOperator(mdp, pi, ens, b, alpha, "lower_bound")
        u_mean, _, _ = fixed_point_iterate(np.zeros(shape), mean_op)
        u_lb, _, _ = fixed_point_iterate(np.zeros(shape), lb_op)
        gap = solve_fixed_point(lb_op) - solve_fixed_point(mean_op) - b * mean_op.stats.std
        shift_gap = max(shift_gap, float(np.max(np.abs(gap))))
        fp_gap = max(
            fp_gap,
            float(np.max(np.abs(u_mean - mean_op.direct_error()))),
            float(np.max(np.abs(u_lb - lb_op.direct_error()))),
        )
        for op in (mean_op, lb_op):
            rep = contraction_certificate(op, trials, rng)
            ratio = max(ratio, rep.max_ratio)
            monotone = monotone and rep.monotone

    cases = []
    exact = EnsembleTable.replicate(q_true, 2)
    for label, ens, b in (
        ("exact_beta0", exact, 0.0),
        ("exact_identical_beta1", exact, 1.0),
        ("spread_beta0.5", EnsembleTable((q_true - 1.0, q_true + 1.0)), 0.5),
        ("underestimating_beta1", EnsembleTable((q_true - 2.0, q_true)), 1.0),
    ):
        res = zero_error_check(mdp, pi, ens, b, alpha)
        cases.append(
            {
                "case": label,
                "holds": res.holds,
                "n_witnesses": len(res.witnesses),
                "underestimation_holds": res.underestimation_holds,
            }
        )
    return {
        "lemma1_max_gap": shift_gap,
        "contraction_max_ratio": ratio,
        "gamma": mdp.gamma,
        "monotone": monotone,
        "fixedpoint_max_gap": fp_gap,
        "zero_error_cases": cases,
    }
