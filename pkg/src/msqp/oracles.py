"""Exact ground truth for soft and standard optimal control on tabular MDPs.

Fixed points are found by plain value iteration with a stopping rule that
bounds the Bellman *residual* (not the step) by the requested tolerance.
Lagrange multipliers come from one dense resolvent solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    BehaviorSpec,
    InvalidMDPError,
    OccupancyMeasure,
    TabularMDP,
    density_ratio,
    flattened_policy,
    occupancy,
    policy_transition,
)

log = logging.getLogger(__name__)

MIN_ALPHA = 1e-8


class ConvergenceError(RuntimeError):
    pass


class CoverageError(ValueError):
    """The comparator's occupancy from ``P_b`` leaves the support of ``P_b``."""


@dataclass(frozen=True, eq=False)
class SoftConfig:
    alpha: float
    pi_b: np.ndarray
    tolerance: float = 1e-11
    max_iterations: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "pi_b", np.asarray(self.pi_b, dtype=float))
        if not self.alpha >= MIN_ALPHA:
            raise ValueError(f"alpha must be >= {MIN_ALPHA}; use the hard-max oracles below that")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


def _support_logits(q, pi_b, alpha):
    support = pi_b > 0
    if np.any(~support.any(axis=-1)):
        raise InvalidMDPError("behavior policy has a state with empty support")
    with np.errstate(divide="ignore"):
        z = np.where(support, q / alpha + np.log(np.where(support, pi_b, 1.0)), -np.inf)
    return z


def soft_envelope(q, pi_b, alpha, s=None):
    """``alpha * log sum_a exp(q(s,a)/alpha) pi_b(a|s)`` for every state.

    Only actions in the support of ``pi_b`` contribute. Pass ``s`` to get a
    single state's value.
    """
    q = np.asarray(q, dtype=float)
    pi_b = np.asarray(pi_b, dtype=float)
    if s is not None:
        q, pi_b = q[s : s + 1], pi_b[s : s + 1]
    z = _support_logits(q, pi_b, alpha)
    m = z.max(axis=-1)
    out = alpha * (m + np.log(np.exp(z - m[..., None]).sum(axis=-1)))
    return float(out[0]) if s is not None else out


def softmax_policy(q, pi_b, alpha):
    """``softmax(q/alpha + log pi_b)`` per state, zero off the support of ``pi_b``."""
    z = _support_logits(np.asarray(q, dtype=float), np.asarray(pi_b, dtype=float), alpha)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def greedy_policy(q, support=None):
    """Deterministic argmax policy, ties to the lowest action index.

    With ``support`` (a boolean table) the argmax only ranges over allowed
    actions.
    """
    q = np.asarray(q, dtype=float)
    if support is not None:
        support = np.asarray(support, dtype=bool)
        if np.any(~support.any(axis=1)):
            raise InvalidMDPError("support has a state with no allowed action")
        q = np.where(support, q, -np.inf)
    pi = np.zeros(q.shape)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def soft_backup(mdp: TabularMDP, q, pi_b, alpha, reward=None):
    r = mdp.reward_mean if reward is None else reward
    return r + mdp.gamma * mdp.transition @ soft_envelope(q, pi_b, alpha)


def hard_backup(mdp: TabularMDP, q, reward=None):
    r = mdp.reward_mean if reward is None else reward
    return r + mdp.gamma * mdp.transition @ np.asarray(q).max(axis=1)


def _iterate(backup, q0, gamma, tolerance, max_iterations):
    q = q0
    if gamma == 0.0:
        return backup(q)
    # ||T q' - q'|| <= g ||q' - q|| so this step size makes the residual <= tolerance
    step_tol = tolerance * (1.0 - gamma) / gamma
    for _ in range(max_iterations):
        nxt = backup(q)
        if np.max(np.abs(nxt - q)) <= step_tol:
            return nxt
        q = nxt
    raise ConvergenceError(f"no fixed point within {max_iterations} iterations (tolerance {tolerance})")


def soft_value_iteration(mdp: TabularMDP, cfg: SoftConfig, reward=None) -> np.ndarray:
    """Soft-optimal Q-function ``q*_alpha`` (for ``reward`` if given)."""
    return _iterate(
        lambda q: soft_backup(mdp, q, cfg.pi_b, cfg.alpha, reward),
        np.zeros(mdp.shape),
        mdp.gamma,
        cfg.tolerance,
        cfg.max_iterations,
    )


def value_iteration(mdp: TabularMDP, tolerance=1e-11, max_iterations=100_000, reward=None) -> np.ndarray:
    """Optimal Q-function ``q*`` by hard-max value iteration."""
    return _iterate(lambda q: hard_backup(mdp, q, reward), np.zeros(mdp.shape), mdp.gamma, tolerance, max_iterations)


def soft_optimal_policy(q_alpha, cfg: SoftConfig) -> np.ndarray:
    return softmax_policy(q_alpha, cfg.pi_b, cfg.alpha)


def optimal_policy(q_star) -> np.ndarray:
    """``pi*``: greedy in ``q*`` over all actions."""
    return greedy_policy(q_star)


def _resolvent_multiplier(mdp: TabularMDP, b: BehaviorSpec, q, pi) -> np.ndarray:
    Pb = b.joint
    cover = density_ratio(occupancy(mdp, pi, Pb), Pb)
    if not np.isfinite(cover.sup):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(cover.ratio))[0])
        raise CoverageError(f"occupancy of the comparator from P_b leaves the data support at {bad}")
    M = policy_transition(mdp, pi)
    n = M.shape[0]
    x = np.linalg.solve(np.eye(n) - mdp.gamma * M.T, (Pb * q).ravel()).reshape(mdp.shape)
    support = Pb > 0
    return np.where(support, x / np.where(support, Pb, 1.0), 0.0)


def lagrange_soft(mdp: TabularMDP, b: BehaviorSpec, cfg: SoftConfig, q_alpha=None) -> np.ndarray:
    """Dual function ``l*_alpha = (I - g P^T)^{-1}(P_b q*_alpha) / P_b`` on the data support."""
    if q_alpha is None:
        q_alpha = soft_value_iteration(mdp, cfg)
    return _resolvent_multiplier(mdp, b, q_alpha, soft_optimal_policy(q_alpha, cfg))


def lagrange_hard(mdp: TabularMDP, b: BehaviorSpec, tolerance=1e-11, q_star=None) -> np.ndarray:
    """Dual function ``l*`` paired with ``q*`` (transport under the greedy policy)."""
    if q_star is None:
        q_star = value_iteration(mdp, tolerance)
    return _resolvent_multiplier(mdp, b, q_star, optimal_policy(q_star))


def multiplier_bound(mdp: TabularMDP, b: BehaviorSpec, pi) -> float:
    """Sup-norm bound ``R_max (1-g)^{-2} ||d_{pi,P_b} / P_b||_inf`` on the multiplier.

    The resolvent of ``P_b`` is ``d_{pi,P_b}/(1-g)`` and ``q <= R_max/(1-g)``,
    which gives the two factors of ``1/(1-g)``.
    """
    ratio = density_ratio(occupancy(mdp, pi, b.joint), b.joint).sup
    return mdp.r_max / (1.0 - mdp.gamma) ** 2 * ratio


@dataclass(frozen=True, eq=False)
class ConcentrabilityReport:
    value: float
    method: str  # tabular-exact | linear-generalized-eigen | random-search-lower-bound
    test_distribution: np.ndarray


def test_distribution(target, pi_b) -> np.ndarray:
    """``d_target(s) * flat_b(a|s)`` where ``flat_b`` is the flattened behavior policy."""
    marginal = target.state_marginal if isinstance(target, OccupancyMeasure) else np.asarray(target, dtype=float)
    if marginal.ndim == 2:
        marginal = marginal.sum(axis=1)
    return marginal[:, None] * flattened_policy(pi_b)


def _generalized_max_eig(sigma_test, sigma_b, rel_tol=1e-10):
    lam, U = np.linalg.eigh(sigma_b)
    scale = max(lam.max(), 0.0)
    if scale == 0.0:
        return np.inf if np.abs(sigma_test).max() > 0 else 0.0
    keep = lam > rel_tol * scale
    null = U[:, ~keep]
    if null.size and np.abs(null.T @ sigma_test @ null).max() > rel_tol * max(np.abs(sigma_test).max(), 1e-300):
        return np.inf
    W = U[:, keep] / np.sqrt(lam[keep])
    return float(np.linalg.eigvalsh(W.T @ sigma_test @ W).max())


def concentrability(mdp, b: BehaviorSpec, target, class_spec, q_ref=None, method=None,
                    n_directions=10_000, rng=None) -> ConcentrabilityReport:
    """Model-free concentrability of ``class_spec`` at the test distribution.

    The supremum is over directions ``q - q_ref``; for the box and ball
    classes with ``q_ref`` in the interior every direction is available, so
    ``q_ref`` does not change the value.
    """
    from .function_classes import LinearBall, Singleton

    mu_test = test_distribution(target, b.behavior_policy)
    Pb = b.joint
    if method is None:
        method = "linear-generalized-eigen" if isinstance(class_spec, LinearBall) else "tabular-exact"

    if method == "tabular-exact":
        if isinstance(class_spec, Singleton):
            return ConcentrabilityReport(0.0, method, mu_test)
        ratio = density_ratio(mu_test, Pb)
        return ConcentrabilityReport(ratio.sup, method, mu_test)

    if isinstance(class_spec, LinearBall):
        Phi = class_spec.features.matrix
    else:
        Phi = np.eye(mu_test.size)

    if method == "linear-generalized-eigen":
        sigma_t = Phi.T @ (mu_test.ravel()[:, None] * Phi)
        sigma_b = Phi.T @ (Pb.ravel()[:, None] * Phi)
        return ConcentrabilityReport(_generalized_max_eig(sigma_t, sigma_b), method, mu_test)

    if method == "random-search-lower-bound":
        rng = np.random.default_rng(rng)
        X = rng.standard_normal((n_directions, Phi.shape[1])) @ Phi.T
        num = (X**2) @ mu_test.ravel()
        den = (X**2) @ Pb.ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
        return ConcentrabilityReport(float(ratios.max()), method, mu_test)

    raise ValueError(f"unknown concentrability method {method!r}")


@dataclass
class MarginProfile:
    gaps: np.ndarray  # (S, A): q*(s, pi*(s)) - q*(s, a')
    state_weights: np.ndarray
    t_grid: np.ndarray
    per_action: np.ndarray  # (len(t_grid), A)
    cdf_points: list = field(default_factory=list)
    fitted_beta: float | None = None
    fitted_t0: float | None = None

    @property
    def gap_samples(self):
        S, A = self.gaps.shape
        return [(float(self.state_weights[s]), a, float(self.gaps[s, a])) for s in range(S) for a in range(A)]


def margin_profile(mdp: TabularMDP, q_star, d_star, t_grid, atol: float = 1e-9) -> MarginProfile:
    """Exact small-gap mass ``P_{s~d*}(0 < |gap(s, a')| < t)`` for each ``t`` and ``a'``.

    Both strict inequalities are read with slack ``atol`` so that a gap equal
    to ``t`` up to fixed-point error does not count as smaller than ``t``.

    ``cdf_points`` keeps the worst action per ``t``. ``(beta, t0)`` come from a
    log-log least-squares fit of ``P <= (t/t0)^beta`` over positive points and
    are descriptive only.
    """
    q_star = np.asarray(q_star, dtype=float)
    weights = d_star.state_marginal if isinstance(d_star, OccupancyMeasure) else np.asarray(d_star, dtype=float)
    if weights.ndim == 2:
        weights = weights.sum(axis=1)
    best = np.argmax(q_star, axis=1)
    gaps = q_star[np.arange(q_star.shape[0]), best][:, None] - q_star
    t_grid = np.asarray(t_grid, dtype=float)
    small = (np.abs(gaps)[None] > atol) & (np.abs(gaps)[None] < t_grid[:, None, None] - atol)
    per_action = np.einsum("s,tsa->ta", weights, small.astype(float))
    worst = per_action.max(axis=1)
    points = [(float(t), float(p)) for t, p in zip(t_grid, worst)]

    beta = t0 = None
    pos = worst > 0
    if pos.sum() >= 2 and len(np.unique(t_grid[pos])) >= 2:
        slope, intercept = np.polyfit(np.log(t_grid[pos]), np.log(worst[pos]), 1)
        if slope > 0:
            beta, t0 = float(slope), float(np.exp(-intercept / slope))
    return MarginProfile(gaps, weights, t_grid, per_action, points, beta, t0)


def perturbed_soft_q(mdp: TabularMDP, cfg: SoftConfig, c) -> np.ndarray:
    """Soft fixed point for the reward ``r + c`` (``c >= 0``)."""
    c = np.asarray(c, dtype=float)
    if np.any(c < 0):
        raise ValueError("perturbation must be nonnegative")
    return soft_value_iteration(mdp, cfg, reward=mdp.reward_mean + c)


def perturbed_hard_q(mdp: TabularMDP, c, tolerance=1e-11) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if np.any(c < 0):
        raise ValueError("perturbation must be nonnegative")
    return value_iteration(mdp, tolerance, reward=mdp.reward_mean + c)


@dataclass(frozen=True)
class AssumptionReport:
    alpha: float
    policy_ratio: float  # ||pi*_alpha / pi_b||_inf
    reward_scale_lhs: float  # alpha * log(policy_ratio)
    reward_scale_ok: bool
    coverage_ratio: float  # ||d_{pi*_alpha, P_b} / P_b||_inf
    coverage_ok: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_assumptions(mdp: TabularMDP, b: BehaviorSpec, alpha: float, tolerance=1e-11) -> AssumptionReport:
    """Reward-scale and coverage checks for the comparator at temperature ``alpha``.

    ``alpha = 0`` switches to ``pi*`` and treats ``0 * log(ratio)`` as zero.
    """
    pi_b = b.behavior_policy
    if alpha == 0:
        pi = optimal_policy(value_iteration(mdp, tolerance))
    else:
        cfg = SoftConfig(alpha, pi_b, tolerance)
        pi = soft_optimal_policy(soft_value_iteration(mdp, cfg), cfg)
    ratio = density_ratio(pi, pi_b).sup
    lhs = 0.0 if alpha == 0 else float(alpha * np.log(ratio))
    cover = density_ratio(occupancy(mdp, pi, b.joint), b.joint).sup
    return AssumptionReport(
        alpha=float(alpha),
        policy_ratio=ratio,
        reward_scale_lhs=lhs,
        reward_scale_ok=bool(lhs <= mdp.r_min),
        coverage_ratio=cover,
        coverage_ok=bool(np.isfinite(cover)),
    )
