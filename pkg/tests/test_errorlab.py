import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import population_stats
from pessilab.errorlab import (
    CertificateFailure,
    ConvergenceError,
    EnsembleTable,
    ErrorOperator,
    apply_error_operator,
    contraction_certificate,
    ensemble_stats,
    fixed_point_iterate,
    random_ensemble,
    solve_fixed_point,
    temporal_errors,
    verify_mdp,
    zero_error_check,
)
from pessilab.mdp import MdpSpec, TabularPolicy, exact_soft_q, expected_next, make_random_mdp


def self_loop(reward=1.0, gamma=0.9):
    return MdpSpec(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma, np.ones(1))


def instance(seed, n_states=8, n_actions=3, k=2, gamma=0.9):
    rng = np.random.default_rng(seed)
    mdp = make_random_mdp(n_states, n_actions, gamma, seed)
    pi = TabularPolicy.random(n_states, n_actions, rng)
    return mdp, pi, random_ensemble((n_states, n_actions), k, rng), rng


# --- ensemble statistics -------------------------------------------------------


def test_two_members_one_and_three():
    st_ = ensemble_stats(EnsembleTable((np.full((1, 1), 1.0), np.full((1, 1), 3.0))), 1.0)
    assert (st_.mean[0, 0], st_.std[0, 0], st_.lower_bound[0, 0]) == (2.0, 1.0, 1.0)


def test_beta_zero_and_identical_members():
    _, _, ens, _ = instance(0)
    assert np.array_equal(ensemble_stats(ens, 0.0).lower_bound, ensemble_stats(ens, 0.0).mean)
    same = EnsembleTable.replicate(ens.members[0], 3)
    stats = ensemble_stats(same, 5.0)
    assert np.all(stats.std == 0) and np.array_equal(stats.lower_bound, stats.mean)


def test_single_member_has_zero_std():
    stats = ensemble_stats(EnsembleTable((np.arange(6.0).reshape(2, 3),)), 2.0)
    assert np.all(stats.std == 0)


def test_empty_ensemble_and_negative_beta_rejected():
    with pytest.raises(ValueError):
        EnsembleTable(())
    with pytest.raises(ValueError):
        ensemble_stats(EnsembleTable((np.zeros((1, 1)),)), -0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.floats(0.0, 3.0), st.integers(0, 10**6))
def test_stats_match_population_oracle(k, beta, seed):
    rng = np.random.default_rng(seed)
    members = rng.normal(size=(k, 3, 2)) * 5
    stats = ensemble_stats(EnsembleTable(tuple(members)), beta)
    mean, std, lb = population_stats(members, beta)
    assert np.allclose(stats.mean, mean, atol=1e-12) and np.allclose(stats.std, std, atol=1e-12)
    assert np.allclose(stats.lower_bound, lb, atol=1e-12)


# --- temporal errors and operators -----------------------------------------------------


def test_exact_critic_has_zero_mean_temporal_error():
    mdp, pi, _, _ = instance(1)
    q = exact_soft_q(mdp, pi, 0.3)
    te = temporal_errors(mdp, pi, EnsembleTable.replicate(q, 3), beta=2.0, alpha=0.3)
    assert np.max(np.abs(te.u_mean)) <= 1e-10


def test_self_loop_temporal_error_is_reward():
    te = temporal_errors(self_loop(), TabularPolicy.uniform(1, 1), EnsembleTable.replicate(np.zeros((1, 1)), 2), 1.0)
    assert te.u_mean[0, 0] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_lower_bound_temporal_error_offset(seed):
    mdp, pi, ens, rng = instance(seed)
    beta = float(rng.uniform(0, 2))
    te = temporal_errors(mdp, pi, ens, beta, alpha=0.2)
    sigma = ensemble_stats(ens, beta).std
    # independent expectation by explicit loops
    S, A = sigma.shape
    e_sigma = np.array([[sum(mdp.transition[s, a, t] * sum(pi.probs[t, b] * sigma[t, b] for b in range(A))
                             for t in range(S)) for a in range(A)] for s in range(S)])
    assert np.max(np.abs((te.u_lb - te.u_mean) - (-mdp.gamma * beta * e_sigma))) <= 1e-12


def test_operator_self_loop_zero_field():
    op = ErrorOperator(self_loop(), TabularPolicy.uniform(1, 1), EnsembleTable.replicate(np.zeros((1, 1)), 2), 0.0)
    assert op(np.zeros((1, 1)))[0, 0] == 1.0


@pytest.mark.parametrize("variant", ["mean", "lower_bound"])
def test_constant_fields_contract_by_gamma(variant):
    mdp, pi, ens, _ = instance(3)
    op = ErrorOperator(mdp, pi, ens, 0.7, variant=variant)
    diff = op(np.full(op.shape, 4.0)) - op(np.full(op.shape, -1.5))
    assert np.allclose(diff, mdp.gamma * 5.5, atol=1e-12, rtol=0)


def test_lower_bound_operator_at_beta_zero_equals_mean_operator():
    mdp, pi, ens, rng = instance(4)
    f = rng.uniform(-10, 10, size=(8, 3))
    assert np.array_equal(
        ErrorOperator(mdp, pi, ens, 0.0, variant="lower_bound")(f), ErrorOperator(mdp, pi, ens, 0.0)(f)
    )


def test_operator_rejects_bad_shape_and_variant():
    mdp, pi, ens, _ = instance(5)
    op = ErrorOperator(mdp, pi, ens, 1.0)
    with pytest.raises(ValueError):
        op(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        apply_error_operator(np.zeros((8, 3)), op.temporal, op.stats, mdp, pi, "median", 1.0)


# --- fixed points --------------------------------------------------------------------


def test_self_loop_fixed_point_is_ten():
    op = ErrorOperator(self_loop(), TabularPolicy.uniform(1, 1), EnsembleTable.replicate(np.zeros((1, 1)), 2), 0.0)
    f, iters, res = fixed_point_iterate(np.zeros((1, 1)), op)
    assert abs(f[0, 0] - 10.0) <= 1e-10 and 9.0 * res <= 1e-10 and iters > 1


@pytest.mark.parametrize("variant", ["mean", "lower_bound"])
@pytest.mark.parametrize("seed", range(4))
def test_fixed_point_equals_direct_error(variant, seed):
    mdp, pi, ens, rng = instance(seed)
    op = ErrorOperator(mdp, pi, ens, float(rng.uniform(0, 2)), alpha=0.1, variant=variant)
    tol = 1e-10
    f, _, _ = fixed_point_iterate(np.zeros(op.shape), op, tol=tol)
    assert np.max(np.abs(f - op.direct_error())) <= 10 * tol
    g, _, _ = fixed_point_iterate(rng.uniform(-50, 50, size=op.shape), op, tol=tol)
    assert np.max(np.abs(f - g)) <= 10 * tol
    assert np.max(np.abs(solve_fixed_point(op) - op.direct_error())) <= 1e-10


def test_nonconvergence_raises_with_residual():
    mdp, pi, ens, _ = instance(6, gamma=0.99)
    with pytest.raises(ConvergenceError) as info:
        fixed_point_iterate(np.zeros((8, 3)), ErrorOperator(mdp, pi, ens, 1.0), max_iters=5)
    assert info.value.residual > 0 and info.value.iterations == 5
    with pytest.raises(ValueError):
        fixed_point_iterate(np.zeros((8, 3)), ErrorOperator(mdp, pi, ens, 1.0), tol=0.0)


@pytest.mark.parametrize("seed", range(3))
def test_beta_shift_of_lower_bound_fixed_point(seed):
    """Raising beta by d moves the lower-bound error by d * sigma when the temporal
    error is recomputed, and by d * (I - gamma P Pi)^-1 sigma when it is held fixed."""
    mdp, pi, ens, rng = instance(seed)
    beta, d = 0.6, 0.35
    low, high = ErrorOperator(mdp, pi, ens, beta, variant="lower_bound"), ErrorOperator(
        mdp, pi, ens, beta + d, variant="lower_bound"
    )
    sigma = low.stats.std
    shift = solve_fixed_point(high) - solve_fixed_point(low)
    assert np.max(np.abs(shift - d * sigma)) <= 1e-10
    assert np.max(np.abs(shift - (high.direct_error() - low.direct_error()))) <= 1e-10

    frozen = lambda f, b: low.temporal.u_lb + b * sigma + mdp.gamma * expected_next(mdp, pi, f)  # noqa: E731
    propagated = np.zeros_like(sigma)
    f_low, f_high = np.zeros_like(sigma), np.zeros_like(sigma)
    for _ in range(4000):
        propagated = sigma + mdp.gamma * expected_next(mdp, pi, propagated)
        f_low, f_high = frozen(f_low, beta), frozen(f_high, beta + d)
    assert np.max(np.abs((f_high - f_low) - d * propagated)) <= 1e-9


# --- contraction ------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["mean", "lower_bound"])
def test_contraction_certificate_random_mdp(variant):
    mdp, pi, ens, rng = instance(7, gamma=0.95)
    rep = contraction_certificate(ErrorOperator(mdp, pi, ens, 1.3, 0.2, variant), 1000, rng)
    assert rep.max_ratio <= mdp.gamma + 1e-9 and rep.trials == 1000
    assert rep.monotone and rep.monotone_violations == 0


def test_contraction_equal_fields_and_constant_ratio():
    mdp, pi, ens, rng = instance(8)
    op = ErrorOperator(mdp, pi, ens, 1.0)
    f = rng.uniform(-10, 10, size=op.shape)
    assert np.max(np.abs(op(f) - op(f.copy()))) == 0.0
    c1, c2 = np.full(op.shape, 2.0), np.full(op.shape, -3.0)
    ratio = np.max(np.abs(op(c1) - op(c2))) / 5.0
    assert ratio == pytest.approx(mdp.gamma, abs=1e-12)


class _Expanding:
    """An operator that doubles its input; must fail the certificate."""

    gamma = 0.5
    shape = (2, 2)

    def __call__(self, f):
        return 2.0 * f


def test_certificate_failure_names_the_pair():
    with pytest.raises(CertificateFailure, match="f1="):
        contraction_certificate(_Expanding(), 3, np.random.default_rng(0))


# --- zero-error and underestimation -------------------------------------------------------


def test_exact_replicated_beta_zero_holds():
    mdp, pi, _, _ = instance(9)
    q = exact_soft_q(mdp, pi, 0.1)
    assert zero_error_check(mdp, pi, EnsembleTable.replicate(q, 2), 0.0, 0.1).holds
    assert zero_error_check(mdp, pi, EnsembleTable.replicate(q, 2), 1.0, 0.1).holds


def test_spread_ensemble_reports_witnesses():
    mdp, pi, _, _ = instance(10)
    q = exact_soft_q(mdp, pi)
    res = zero_error_check(mdp, pi, EnsembleTable((q - 1, q + 1)), 0.5)
    assert not res.holds and 1 <= len(res.witnesses) <= 10
    assert all(abs(w["pessimism_gap"] - 0.5) <= 1e-12 for w in res.witnesses)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 3.0), st.floats(0.01, 5.0))
def test_underestimation_inequality(seed, beta, spread):
    mdp, pi, _, rng = instance(seed, n_states=5, n_actions=2)
    q = exact_soft_q(mdp, pi)
    noise = rng.uniform(0.1, spread + 0.1, size=q.shape)
    # mean = q - 1 (so U_mean = +1 everywhere), std = noise > 0
    ens = EnsembleTable((q - 1 - noise, q - 1 + noise))
    res = zero_error_check(mdp, pi, ens, beta)
    assert res.underestimation_holds and not res.underestimation_violations
    stats = ensemble_stats(ens, beta)
    u_mean, u_lb = q - stats.mean, q - stats.lower_bound
    assert np.all(u_mean > 0) and np.all(np.abs(u_mean) <= np.abs(u_lb))


def test_verify_report_keys():
    rep = verify_mdp(make_random_mdp(4, 2, 0.9, 0), seed=0, trials=50)
    assert {"lemma1_max_gap", "contraction_max_ratio", "fixedpoint_max_gap", "zero_error_cases"} <= set(rep)
    assert rep["lemma1_max_gap"] <= 1e-10 and rep["contraction_max_ratio"] <= 0.9 + 1e-9
