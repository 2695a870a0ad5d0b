import itertools

import numpy as np
import pytest
from factories import random_mdp, random_policy, random_problem
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from msqp.function_classes import FeatureMap, LinearBall, Singleton, TabularBox
from msqp.harness.instances import benchmark, gap_variant, single_state
from msqp.mdp import (
    BehaviorSpec,
    InvalidMDPError,
    TabularMDP,
    occupancy,
    policy_transition,
    regularized_value,
)
from msqp.oracles import (
    ConvergenceError,
    CoverageError,
    SoftConfig,
    check_assumptions,
    concentrability,
    greedy_policy,
    hard_backup,
    lagrange_hard,
    lagrange_soft,
    margin_profile,
    multiplier_bound,
    optimal_policy,
    perturbed_hard_q,
    perturbed_soft_q,
    soft_backup,
    soft_envelope,
    soft_optimal_policy,
    soft_value_iteration,
    softmax_policy,
    value_iteration,
)
from msqp.oracles import (
    test_distribution as occupancy_test_measure,
)

# -- soft envelope ---------------------------------------------------------------------


def test_envelope_of_constant():
    pi_b = np.array([[0.2, 0.0, 0.8]])
    q = np.array([[3.0, -50.0, 3.0]])
    assert soft_envelope(q, pi_b, 0.37, s=0) == pytest.approx(3.0, abs=1e-14)


def test_envelope_small_temperature():
    val = soft_envelope(np.array([[2.0, 1.0]]), np.array([[0.5, 0.5]]), 1e-3, s=0)
    assert 2.0 - 1e-3 * np.log(2) - 1e-15 <= val <= 2.0


def test_envelope_zero_vector():
    assert soft_envelope(np.zeros((1, 2)), np.full((1, 2), 0.5), 1.0, s=0) == 0.0


def test_envelope_empty_support():
    with pytest.raises(InvalidMDPError, match="empty support"):
        soft_envelope(np.zeros((1, 2)), np.zeros((1, 2)), 1.0)


def test_envelope_overflow_safe():
    val = soft_envelope(np.array([[1e4, 1e4 - 1]]), np.full((1, 2), 0.5), 1e-3)
    assert np.isfinite(val).all() and val[0] == pytest.approx(1e4 - 1e-3 * np.log(2))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.floats(1e-3, 10.0))
def test_envelope_sandwich(seed, alpha):
    rng = np.random.default_rng(seed)
    q = rng.normal(scale=5, size=(4, 3))
    pi_b = rng.dirichlet(np.ones(3), size=4) * (rng.random((4, 3)) > 0.3)
    pi_b[:, 0] += 1e-3
    pi_b /= pi_b.sum(axis=1, keepdims=True)
    supp = pi_b > 0
    omega = soft_envelope(q, pi_b, alpha)
    with np.errstate(divide="ignore"):
        low = np.where(supp, q + alpha * np.log(pi_b), -np.inf).max(axis=1)
    high = np.where(supp, q, -np.inf).max(axis=1)
    assert np.all(low <= omega + 1e-12) and np.all(omega <= high + 1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(1, 20))
def test_logsumexp_inequality(seed, k):
    x = np.random.default_rng(seed).normal(scale=10, size=k)
    lse = logsumexp(x)
    assert x.max() <= lse <= x.max() + np.log(k)


# -- fixed points ------------------------------------------------------------------------


def test_soft_vi_constant_fixed_point():
    mdp, b = single_state(rewards=(1.0, 1.0), gamma=0.5)
    for alpha in (0.01, 1.0, 50.0):
        q = soft_value_iteration(mdp, SoftConfig(alpha, b.behavior_policy))
        assert np.allclose(q, 2.0, atol=1e-10)


def test_gamma_zero_fixed_points():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, gamma=0.0)
    pi_b = random_policy(rng, *mdp.shape, floor=0.05)
    assert np.array_equal(soft_value_iteration(mdp, SoftConfig(0.3, pi_b)), mdp.reward_mean)
    assert np.array_equal(value_iteration(mdp), mdp.reward_mean)


def _damped_soft_iteration(mdp, pi_b, alpha, iters=4000):
    q = np.zeros(mdp.shape)
    for _ in range(iters):
        v = alpha * logsumexp(q / alpha, b=pi_b, axis=1)
        q = 0.5 * q + 0.5 * (mdp.reward_mean + mdp.gamma * mdp.transition @ v)
    return q


def test_soft_vi_matches_damped_iteration():
    P = np.array([[[0.8, 0.2], [0.1, 0.9]], [[0.5, 0.5], [0.3, 0.7]]])
    mdp = TabularMDP(P, np.array([[0.3, 1.0], [0.6, 0.0]]), 0.9, np.array([0.5, 0.5]))
    pi_b = np.array([[0.3, 0.7], [0.6, 0.4]])
    q = soft_value_iteration(mdp, SoftConfig(0.5, pi_b))
    assert np.max(np.abs(q - _damped_soft_iteration(mdp, pi_b, 0.5))) < 1e-9


def test_value_iteration_single_state():
    mdp, _ = single_state(rewards=(1.0, 0.0), gamma=0.5)
    assert np.allclose(value_iteration(mdp), [[2.0, 1.0]], atol=1e-10)


def test_soft_to_hard_limit():
    mdp, b = benchmark()
    q_star = value_iteration(mdp)
    errs = []
    for alpha in (0.1, 0.01, 0.001):
        errs.append(np.max(np.abs(soft_value_iteration(mdp, SoftConfig(alpha, b.behavior_policy)) - q_star)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 10 * 1e-3 * np.log(1 / b.behavior_policy.min()) / (1 - mdp.gamma)


def test_residual_tolerance_met():
    mdp, b = benchmark()
    cfg = SoftConfig(0.2, b.behavior_policy, tolerance=1e-9)
    q = soft_value_iteration(mdp, cfg)
    assert np.max(np.abs(soft_backup(mdp, q, b.behavior_policy, 0.2) - q)) <= 1e-9


def test_nonconvergence_raises():
    mdp, _b = benchmark()
    with pytest.raises(ConvergenceError):
        value_iteration(mdp, tolerance=1e-12, max_iterations=5)


def test_soft_config_rejects_tiny_alpha():
    with pytest.raises(ValueError, match="alpha"):
        SoftConfig(1e-9, np.ones((1, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.01, 5.0))
def test_backups_are_contractions(seed, alpha):
    mdp, b, rng = random_problem(seed, gamma=0.9)
    q1, q2 = rng.normal(scale=3, size=(2, *mdp.shape))
    dist = np.max(np.abs(q1 - q2))
    soft = np.max(np.abs(soft_backup(mdp, q1, b.behavior_policy, alpha) - soft_backup(mdp, q2, b.behavior_policy, alpha)))
    hard = np.max(np.abs(hard_backup(mdp, q1) - hard_backup(mdp, q2)))
    assert soft <= mdp.gamma * dist + 1e-12
    assert hard <= mdp.gamma * dist + 1e-12


# -- policies ------------------------------------------------------------------------------


def test_softmax_of_constant_is_behavior():
    pi_b = np.array([[0.2, 0.5, 0.3], [0.0, 0.4, 0.6]])
    q = np.array([[1.0, 1.0, 1.0], [7.0, 7.0, 7.0]])
    assert np.allclose(softmax_policy(q, pi_b, 0.05), pi_b, atol=1e-15)


def test_softmax_high_temperature():
    rng = np.random.default_rng(3)
    pi_b = random_policy(rng, 5, 3, floor=0.05)
    pi = soft_optimal_policy(rng.uniform(0, 10, size=(5, 3)), SoftConfig(1e6, pi_b))
    assert 0.5 * np.abs(pi - pi_b).sum(axis=1).max() <= 1e-5


def test_soft_optimal_policy_maximizes_regularized_value():
    mdp, b = benchmark()
    alpha = 0.1
    cfg = SoftConfig(alpha, b.behavior_policy)
    pi_star = soft_optimal_policy(soft_value_iteration(mdp, cfg), cfg)
    best = regularized_value(mdp, pi_star, b.behavior_policy, alpha)
    rng = np.random.default_rng(0)
    for _ in range(100):
        pi = random_policy(rng, *mdp.shape)
        assert regularized_value(mdp, pi, b.behavior_policy, alpha) <= best + 1e-8


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.sampled_from([0.1, 1.0]))
def test_softmax_lipschitz(seed, alpha):
    rng = np.random.default_rng(seed)
    pi_b = random_policy(rng, 1, 4, floor=0.02)
    q1, q2 = rng.normal(scale=2, size=(2, 1, 4))
    lhs = np.linalg.norm(softmax_policy(q1, pi_b, alpha) - softmax_policy(q2, pi_b, alpha))
    assert lhs <= np.linalg.norm(q1 - q2) / alpha + 1e-12


def test_greedy_ties_and_support():
    q = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 5.0]])
    assert np.array_equal(greedy_policy(q).argmax(axis=1), [0, 2])
    supp = np.array([[True, True, True], [True, True, False]])
    assert np.array_equal(greedy_policy(q, supp).argmax(axis=1), [0, 1])


# -- multipliers ------------------------------------------------------------------------------


def test_multiplier_gamma_zero_is_q():
    rng = np.random.default_rng(1)
    mdp = random_mdp(rng, S=3, A=2, gamma=0.0)
    b = BehaviorSpec(np.array([0.6, 0.4, 0.0]), random_policy(rng, 3, 2, floor=0.1))
    cfg = SoftConfig(0.2, b.behavior_policy)
    l_soft = lagrange_soft(mdp, b, cfg)
    q = soft_value_iteration(mdp, cfg)
    assert np.allclose(l_soft[b.support], q[b.support]) and np.all(l_soft[~b.support] == 0)
    l_hard = lagrange_hard(mdp, b)
    assert np.allclose(l_hard[b.support], mdp.reward_mean[b.support]) and np.all(l_hard[~b.support] == 0)


def test_multiplier_neumann_series():
    mdp, b = single_state(rewards=(0.4, 0.9), gamma=0.8)
    cfg = SoftConfig(0.3, b.behavior_policy)
    q = soft_value_iteration(mdp, cfg)
    M = policy_transition(mdp, soft_optimal_policy(q, cfg))
    Pb = b.joint.ravel()
    term, total = Pb * q.ravel(), np.zeros(2)
    for _ in range(400):
        total += term
        term = mdp.gamma * M.T @ term
    assert np.max(np.abs(lagrange_soft(mdp, b, cfg, q).ravel() - total / Pb)) < 1e-8


@pytest.mark.parametrize("kind", ["soft", "hard"])
def test_adjoint_identity(kind):
    mdp, b, rng = random_problem(8, S=5, A=3, gamma=0.9)
    if kind == "soft":
        cfg = SoftConfig(0.2, b.behavior_policy)
        q_opt = soft_value_iteration(mdp, cfg)
        pi = soft_optimal_policy(q_opt, cfg)
        lam = lagrange_soft(mdp, b, cfg, q_opt)
    else:
        q_opt = value_iteration(mdp)
        pi = optimal_policy(q_opt)
        lam = lagrange_hard(mdp, b, q_star=q_opt)
    M = policy_transition(mdp, pi)
    Pb = b.joint.ravel()
    for _ in range(100):
        q = rng.uniform(-10, 10, size=mdp.shape).ravel()
        lhs = np.sum(Pb * lam.ravel() * (q - mdp.gamma * M @ q))
        rhs = np.sum(Pb * q_opt.ravel() * q)
        assert abs(lhs - rhs) <= 1e-8


def test_soft_multiplier_tends_to_hard():
    mdp, b = benchmark()
    l_hard = lagrange_hard(mdp, b)
    l_soft = lagrange_soft(mdp, b, SoftConfig(1e-4, b.behavior_policy))
    assert np.max(np.abs(l_soft - l_hard)) <= 1e-2


def test_soft_multiplier_error_is_linear_in_alpha():
    mdp, b = benchmark()
    l_hard = lagrange_hard(mdp, b)
    errs = [np.max(np.abs(lagrange_soft(mdp, b, SoftConfig(a, b.behavior_policy)) - l_hard)) for a in (1e-3, 1e-4, 1e-5)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] == pytest.approx(10, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(10, rel=0.05)


def test_coverage_violation_raises():
    # state 1 is absorbing and never in the data, but the optimal policy heads there
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    mdp = TabularMDP(P, np.array([[0.0, 1.0], [1.0, 1.0]]), 0.9, np.array([1.0, 0.0]))
    b = BehaviorSpec(np.array([1.0, 0.0]), np.full((2, 2), 0.5))
    with pytest.raises(CoverageError):
        lagrange_hard(mdp, b)
    with pytest.raises(CoverageError):
        lagrange_soft(mdp, b, SoftConfig(0.5, b.behavior_policy))


def test_multiplier_bound_single_action_chain():
    # l* = 1/(1-g)^2 here, so a bound with a single 1/(1-g) factor would fail
    mdp, b = single_state(rewards=(1.0,), gamma=0.9)
    lam = lagrange_hard(mdp, b)
    assert lam[0, 0] == pytest.approx(100.0)
    assert multiplier_bound(mdp, b, optimal_policy(value_iteration(mdp))) == pytest.approx(100.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.01, 2.0))
def test_multiplier_bound_and_sign(seed, alpha):
    mdp, b, _ = random_problem(seed, gamma=0.85)
    cfg = SoftConfig(alpha, b.behavior_policy)
    q = soft_value_iteration(mdp, cfg)
    lam = lagrange_soft(mdp, b, cfg, q)
    assert lam.min() >= 0
    assert lam.max() <= multiplier_bound(mdp, b, soft_optimal_policy(q, cfg)) * (1 + 1e-10)
    lam_h = lagrange_hard(mdp, b)
    assert lam_h.min() >= 0
    assert lam_h.max() <= multiplier_bound(mdp, b, optimal_policy(value_iteration(mdp))) * (1 + 1e-10)


# -- concentrability ----------------------------------------------------------------------------


def test_concentrability_identical_measures():
    mdp, b, _ = random_problem(2)
    uniform_b = BehaviorSpec(b.state_marginal, np.full(mdp.shape, 1 / mdp.n_actions))
    rep = concentrability(mdp, uniform_b, uniform_b.state_marginal, TabularBox(1.0))
    assert rep.value == pytest.approx(1.0) and rep.method == "tabular-exact"


def test_concentrability_constant_feature():
    mdp, b, rng = random_problem(3)
    target = occupancy(mdp, random_policy(rng, *mdp.shape))
    feats = FeatureMap(np.ones((*mdp.shape, 1)))
    assert concentrability(mdp, b, target, LinearBall(feats, 1.0)).value == pytest.approx(1.0)


def test_concentrability_eigen_matches_brute_force():
    mdp, b, rng = random_problem(4, S=3, A=2)
    target = occupancy(mdp, random_policy(rng, 3, 2))
    exact = concentrability(mdp, b, target, TabularBox(1.0)).value
    eig = concentrability(mdp, b, target, LinearBall(FeatureMap.one_hot(3, 2), 1.0)).value
    assert eig == pytest.approx(exact, rel=1e-10)
    # heavy-tailed directions land near the coordinate axes where the sup is attained
    dirs = np.random.default_rng(0).standard_cauchy((10_000, 6)) ** 3
    mu = occupancy_test_measure(target, b.behavior_policy).ravel()
    brute = np.max((dirs**2 @ mu) / (dirs**2 @ b.joint.ravel()))
    assert brute <= eig * (1 + 1e-12)
    assert brute >= 0.99 * eig
    lower = concentrability(mdp, b, target, TabularBox(1.0), method="random-search-lower-bound", rng=0).value
    assert lower <= eig * (1 + 1e-12)


def test_concentrability_singular_is_infinite():
    mdp, b, _ = random_problem(5, S=3, A=2)
    b = BehaviorSpec(np.array([0.5, 0.5, 0.0]), b.behavior_policy)
    target = np.array([0.2, 0.3, 0.5])
    assert np.isinf(concentrability(mdp, b, target, LinearBall(FeatureMap.one_hot(3, 2), 1.0)).value)
    assert np.isinf(concentrability(mdp, b, target, TabularBox(1.0)).value)
    assert concentrability(mdp, b, target, Singleton(np.zeros((3, 2)))).value == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_tabular_concentrability_at_least_one(seed):
    mdp, b, rng = random_problem(seed)
    target = occupancy(mdp, random_policy(rng, *mdp.shape))
    assert concentrability(mdp, b, target, TabularBox(1.0)).value >= 1 - 1e-12


# -- margins --------------------------------------------------------------------------------------


def test_margin_gap_mdp():
    mdp, _ = gap_variant()
    q = value_iteration(mdp)
    prof = margin_profile(mdp, q, occupancy(mdp, optimal_policy(q)), [0.1, 0.3, 0.5, 0.6])
    probs = [p for _, p in prof.cdf_points]
    assert probs[:3] == [0.0, 0.0, 0.0] and probs[3] > 0
    assert prof.fitted_beta is None


def test_margin_single_action():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng, A=1)
    q = value_iteration(mdp)
    prof = margin_profile(mdp, q, occupancy(mdp, np.ones((mdp.n_states, 1))), np.linspace(0.01, 5, 20))
    assert all(p == 0.0 for _, p in prof.cdf_points)


def test_margin_enumeration():
    mdp, _b, _ = random_problem(9, S=6, A=3)
    q = value_iteration(mdp)
    d = occupancy(mdp, optimal_policy(q))
    grid = np.linspace(0.01, 1.0, 15)
    prof = margin_profile(mdp, q, d, grid)
    w = d.state_marginal
    for i, t in enumerate(grid):
        worst = 0.0
        for a in range(3):
            mass = 0.0
            for s in range(6):
                gap = q[s].max() - q[s, a]
                if 0 < abs(gap) < t:
                    mass += w[s]
            worst = max(worst, mass)
        assert prof.cdf_points[i][1] == pytest.approx(worst, abs=1e-14)
    probs = [p for _, p in prof.cdf_points]
    assert all(x <= y for x, y in itertools.pairwise(probs)) and 0 <= probs[-1] <= 1 + 1e-12
    assert len(prof.gap_samples) == 18


# -- perturbations ------------------------------------------------------------------------------------


def test_perturbation_zero_and_constant_shift():
    mdp, b = single_state(rewards=(0.2, 0.7), gamma=0.6)
    cfg = SoftConfig(0.4, b.behavior_policy)
    base = soft_value_iteration(mdp, cfg)
    assert np.array_equal(perturbed_soft_q(mdp, cfg, np.zeros(mdp.shape)), base)
    shifted = perturbed_soft_q(mdp, cfg, np.full(mdp.shape, 0.25))
    assert np.allclose(shifted, base + 0.25 / 0.4, atol=1e-9)
    hard = perturbed_hard_q(mdp, np.full(mdp.shape, 0.25))
    assert np.allclose(hard, value_iteration(mdp) + 0.25 / 0.4, atol=1e-9)
    with pytest.raises(ValueError):
        perturbed_hard_q(mdp, -np.ones(mdp.shape))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_perturbation_monotone(seed):
    mdp, b, rng = random_problem(seed)
    c = rng.exponential(0.3, size=mdp.shape) * b.support
    cfg = SoftConfig(0.3, b.behavior_policy)
    for base, pert in (
        (soft_value_iteration(mdp, cfg), perturbed_soft_q(mdp, cfg, c)),
        (value_iteration(mdp), perturbed_hard_q(mdp, c)),
    ):
        supp = b.support
        assert np.all(pert[supp] >= base[supp] - 1e-10)
        assert np.sum(b.joint * pert**2) >= np.sum(b.joint * base**2) - 1e-10


# -- assumption checks ---------------------------------------------------------------------------------


def test_assumptions_self_consistent():
    mdp, b = single_state(rewards=(0.5, 0.5), gamma=0.5)
    rep = check_assumptions(mdp, b, 2.0)
    assert rep.policy_ratio == pytest.approx(1.0) and abs(rep.reward_scale_lhs) < 1e-12
    assert rep.reward_scale_ok and rep.coverage_ok


def test_assumptions_hard_limit():
    mdp, b = benchmark()
    rep = check_assumptions(mdp, b, 0.0)
    assert rep.reward_scale_lhs == 0.0 and rep.reward_scale_ok


def test_assumptions_manual_recompute():
    mdp, b = benchmark()
    cfg = SoftConfig(0.5, b.behavior_policy)
    pi = soft_optimal_policy(soft_value_iteration(mdp, cfg), cfg)
    ratio = np.max(pi / b.behavior_policy)
    rep = check_assumptions(mdp, b, 0.5)
    assert rep.policy_ratio == pytest.approx(ratio, rel=1e-12)
    assert rep.reward_scale_lhs == pytest.approx(0.5 * np.log(ratio), rel=1e-12)
    assert rep.reward_scale_ok == (0.5 * np.log(ratio) <= mdp.r_min)
    cover = np.max(occupancy(mdp, pi, b.joint).dist / b.joint)
    assert rep.coverage_ratio == pytest.approx(cover, rel=1e-12)
