"""Contextual-bandit demo where the start distribution leaves the data support.

The data never visit state 2, so any density ratio against the data is
infinite there. A linear class that shares coefficients across states still
has finite concentrability, and the minimax estimator extrapolates through
it. An importance-weighting baseline has no estimate at state 2 and falls
back to the behavior policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import moments, sample_dataset
from ..function_classes import LinearBall, TabularBox
from ..mdp import density_ratio, occupancy, policy_value
from ..oracles import concentrability, greedy_policy, optimal_policy, value_iteration
from ..solvers import SolverConfig, msqp_solve
from .instances import bandit_features, partial_coverage_bandit


@dataclass(frozen=True)
class DemoConfig:
    n: int = 100_000
    seed: int = 0
    alpha: float = 0.05
    covered: bool = False
    q_bound: float = 2.0
    l_bound: float = 5.0


def ipw_policy(data, b, shape):
    """Greedy in the inverse-propensity reward estimate; ``pi_b`` where ``P_b(s) = 0``."""
    m = moments(data, *shape)
    Pb = b.joint
    est = np.where(Pb > 0, m.reward_sum / np.where(Pb > 0, Pb, 1.0), 0.0)
    pi = greedy_policy(est, support=b.behavior_policy > 0)
    uncovered = b.state_marginal <= 0
    pi[uncovered] = b.behavior_policy[uncovered]
    return pi


def partial_coverage_demo(cfg: DemoConfig | None = None) -> dict:
    cfg = cfg or DemoConfig()
    mdp, b = partial_coverage_bandit(covered=cfg.covered)
    q_star = value_iteration(mdp)
    pi_star = optimal_policy(q_star)
    J_star = policy_value(mdp, pi_star)
    feats = bandit_features()

    state_ratio = density_ratio(mdp.mu0, b.state_marginal)
    target = occupancy(mdp, pi_star)
    linear_c = concentrability(mdp, b, target, LinearBall(feats, cfg.q_bound))
    tabular_c = concentrability(mdp, b, target, TabularBox(cfg.q_bound))

    data = sample_dataset(mdp, b, cfg.n, cfg.seed)
    scfg = SolverConfig(alpha=cfg.alpha, seed=cfg.seed, gamma=mdp.gamma)
    res = msqp_solve(data, LinearBall(feats, cfg.q_bound), TabularBox(cfg.l_bound), scfg, b.behavior_policy)
    msqp_regret = J_star - policy_value(mdp, res.policy)
    ipw_regret = J_star - policy_value(mdp, ipw_policy(data, b, mdp.shape))

    value_range = float(mdp.reward_mean.max() - mdp.reward_mean.min()) / (1.0 - mdp.gamma)
    return {
        "n": cfg.n,
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "covered": cfg.covered,
        "state_density_ratio": state_ratio.ratio.tolist(),
        "state_density_ratio_sup": state_ratio.sup,
        "infinite_ratio_states": np.flatnonzero(~np.isfinite(state_ratio.ratio)).tolist(),
        "tabular_concentrability": tabular_c.value,
        "linear_concentrability": linear_c.value,
        "msqp_regret": float(msqp_regret),
        "ipw_regret": float(ipw_regret),
        "value_range": value_range,
        "msqp_regret_fraction": float(msqp_regret / value_range),
        "optimal_value": J_star,
        "q_hat": res.q_table.tolist(),
        "q_star": q_star.tolist(),
    }


def jsonable(doc):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(doc, dict):
        return {k: jsonable(v) for k, v in doc.items()}
    if isinstance(doc, list):
        return [jsonable(v) for v in doc]
    if isinstance(doc, float) and not np.isfinite(doc):
        return str(doc)
    return doc
