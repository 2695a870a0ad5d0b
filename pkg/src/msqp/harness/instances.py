"""Pinned problem instances used by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from ..function_classes import FeatureMap
from ..mdp import BehaviorSpec, TabularMDP, validate_behavior, validate_mdp

BENCHMARK_SEED = 7


def benchmark(seed: int = BENCHMARK_SEED, n_states: int = 10, n_actions: int = 3, gamma: float = 0.9):
    """Random dense MDP with rewards in [0, 1] and a full-support data distribution.

    The behavior policy is mixed 30% toward uniform so every action has
    probability at least ``0.1`` when ``n_actions = 3``.
    """
    rng = np.random.default_rng(seed)
    S, A = n_states, n_actions
    P = rng.dirichlet(np.full(S, 0.5), size=(S, A))
    R = rng.uniform(0.0, 1.0, size=(S, A))
    pi_b = 0.7 * rng.dirichlet(np.full(A, 3.0), size=S) + 0.3 / A
    p_s = rng.dirichlet(np.full(S, 3.0))
    mu0 = rng.dirichlet(np.full(S, 3.0))
    mdp = TabularMDP(P, R, gamma, mu0)
    b = BehaviorSpec(p_s, pi_b)
    validate_mdp(mdp)
    validate_behavior(b, mdp)
    return mdp, b


def gap_variant(seed: int = BENCHMARK_SEED, gap: float = 0.5, level: float = 7.5, spread: float = 0.1):
    """Benchmark dynamics with rewards reverse-engineered so ``q*`` has a uniform gap.

    Pick ``V(s)`` near ``level`` and an optimal action per state, set
    ``q*(s,a) = V(s) - gap [a != a*(s)]`` and ``r = q* - gamma P V``. With the
    defaults every reward lands inside [0, 1].
    """
    mdp, b = benchmark(seed)
    rng = np.random.default_rng(seed + 1)
    S, A = mdp.shape
    V = level + rng.uniform(-spread, spread, size=S)
    best = rng.integers(A, size=S)
    q = V[:, None] - gap * (np.arange(A)[None, :] != best[:, None])
    r = q - mdp.gamma * mdp.transition @ V
    if r.min() < mdp.r_min or r.max() > mdp.r_max:
        raise ValueError(f"gap construction left rewards in [{r.min():.3f}, {r.max():.3f}]; lower spread or gap")
    out = mdp.replace(reward_mean=r)
    validate_mdp(out)
    return out, b


def single_state(rewards=(1.0, 0.0), gamma: float = 0.5, pi_b=None):
    """One state that loops to itself; ``q*(a) = r(a) + gamma max r / (1 - gamma)``."""
    r = np.asarray(rewards, dtype=float)[None, :]
    A = r.shape[1]
    mdp = TabularMDP(np.ones((1, A, 1)), r, gamma, np.array([1.0]))
    pi_b = np.full((1, A), 1.0 / A) if pi_b is None else np.asarray(pi_b, dtype=float).reshape(1, A)
    return mdp, BehaviorSpec(np.array([1.0]), pi_b)


# bandit state covariates; state 2 sits halfway between the two logged states
BANDIT_X = np.array([0.0, 1.0, 0.5])
BANDIT_THETA = np.array([[0.3, 0.6], [0.5, -0.4]])  # per action: (intercept, slope)


def bandit_features() -> FeatureMap:
    """``phi(s, a) = e_a (x) (1, x_s)``: a separate line in ``x`` per action."""
    S, A = len(BANDIT_X), BANDIT_THETA.shape[0]
    phi = np.zeros((S, A, 2 * A))
    for a in range(A):
        phi[:, a, 2 * a] = 1.0
        phi[:, a, 2 * a + 1] = BANDIT_X
    return FeatureMap(phi)


def partial_coverage_bandit(covered: bool = False):
    """Contextual bandit (``gamma = 0``) whose start distribution may leave the data support.

    The data never visit state 2; the start distribution puts half its mass
    there. Rewards are linear in the features, so a linear class can
    extrapolate. ``covered=True`` gives the control case ``mu0 = P_b``.
    """
    S, A = len(BANDIT_X), BANDIT_THETA.shape[0]
    R = np.stack([BANDIT_THETA[a, 0] + BANDIT_THETA[a, 1] * BANDIT_X for a in range(A)], axis=1)
    P = np.zeros((S, A, S))
    P[:, :, 0] = 1.0  # irrelevant when gamma = 0
    p_s = np.array([0.5, 0.5, 0.0])
    mu0 = p_s.copy() if covered else np.array([0.25, 0.25, 0.5])
    mdp = TabularMDP(P, R, 0.0, mu0)
    b = BehaviorSpec(p_s, np.full((S, A), 1.0 / A))
    validate_mdp(mdp)
    validate_behavior(b, mdp)
    return mdp, b


BUILTIN = {
    "benchmark": benchmark,
    "gap": gap_variant,
    "single_state": single_state,
    "bandit": partial_coverage_bandit,
}


def builtin(name: str, **kwargs):
    if name not in BUILTIN:
        raise KeyError(f"unknown builtin instance {name!r}; choose from {sorted(BUILTIN)}")
    return BUILTIN[name](**kwargs)
