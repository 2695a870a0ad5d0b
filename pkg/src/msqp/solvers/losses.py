"""Empirical and population Lagrangians of the penalized Q-estimation problems.

Notation: for a Q table ``q`` the aggregated residual is

    g(s,a) = E_n[1{s,a} (r + gamma * V_q(s') - q(s,a))]

with ``V_q`` the soft envelope (``alpha > 0``) or the hard max (``alpha == 0``).
The Lagrangian is ``E_n[q^2]/2 + sum_{s,a} l(s,a) g(s,a)``; it is linear in
``l``, which is what makes the inner maximization closed-form over a box.
"""

from __future__ import annotations

import numpy as np

from ..data import Moments, OfflineDataset, moments, population_moments
from ..function_classes import ClassMember
from ..mdp import BehaviorSpec, TabularMDP
from ..oracles import soft_envelope


def as_table(f) -> np.ndarray:
    return f.table() if isinstance(f, ClassMember) else np.asarray(f, dtype=float)


def next_value(q, alpha, pi_b) -> np.ndarray:
    """Per-state backup value: soft envelope for ``alpha > 0``, hard max for 0."""
    q = as_table(q)
    if alpha > 0:
        return soft_envelope(q, pi_b, alpha)
    return q.max(axis=1)


def _as_moments(data, shape) -> Moments:
    if isinstance(data, Moments):
        return data
    return moments(data, *shape)


def residual(q, data, alpha, pi_b, gamma) -> np.ndarray:
    """Aggregated residual table ``g`` (the coefficient of ``l`` in the Lagrangian)."""
    q = as_table(q)
    m = _as_moments(data, q.shape)
    v = next_value(q, alpha, pi_b)
    return m.reward_sum + gamma * (m.next_mass @ v) - m.weight * q


def residual_soft(q, data, alpha, pi_b, gamma) -> np.ndarray:
    if not alpha > 0:
        raise ValueError("soft residual needs alpha > 0")
    return residual(q, data, alpha, pi_b, gamma)


def residual_hard(q, data, gamma, pi_b=None) -> np.ndarray:
    return residual(q, data, 0.0, pi_b, gamma)


def residual_tuples(q, data: OfflineDataset, alpha, pi_b, gamma) -> np.ndarray:
    """Same table as :func:`residual`, accumulated tuple by tuple."""
    q = as_table(q)
    v = next_value(q, alpha, pi_b)
    per_tuple = data.r + gamma * v[data.s_next] - q[data.s, data.a]
    out = np.zeros(q.shape)
    np.add.at(out, (data.s, data.a), per_tuple)
    return out / data.n


def inner_max_box(residuals, bound):
    """Maximize ``sum l * g`` over ``0 <= l <= bound``.

    Returns the maximizer ``bound * 1{g > 0}`` and the value
    ``bound * sum max(g, 0)``.
    """
    g = np.asarray(residuals, dtype=float)
    l_hat = np.where(g > 0, float(bound), 0.0)
    return l_hat, float(bound * np.sum(np.maximum(g, 0.0)))


def empirical_lagrangian(q, l, data, alpha, pi_b, gamma) -> float:
    q = as_table(q)
    m = _as_moments(data, q.shape)
    g = residual(q, m, alpha, pi_b, gamma)
    return float(0.5 * np.sum(m.weight * q**2) + np.sum(as_table(l) * g))


def lagrangian_tuples(q, l, data: OfflineDataset, alpha, pi_b, gamma) -> float:
    """``E_n[q^2/2 + l(s,a) (r + gamma V_q(s') - q(s,a))]`` straight from the tuples."""
    q, l = as_table(q), as_table(l)
    v = next_value(q, alpha, pi_b)
    qa = q[data.s, data.a]
    terms = 0.5 * qa**2 + l[data.s, data.a] * (data.r + gamma * v[data.s_next] - qa)
    return float(np.sum(terms) / data.n)


def population_lagrangian(mdp: TabularMDP, b: BehaviorSpec, q, l, alpha) -> float:
    """Exact ``L_alpha(q, l)`` under the data distribution (``alpha = 0`` gives ``L_0``)."""
    return empirical_lagrangian(q, l, population_moments(mdp, b), alpha, b.behavior_policy, mdp.gamma)


def outer_objective(q, data, alpha, pi_b, gamma, l_bound) -> float:
    """``max_{0 <= l <= B} L(q, l)``: the convex function the solvers minimize."""
    q = as_table(q)
    m = _as_moments(data, q.shape)
    g = residual(q, m, alpha, pi_b, gamma)
    return float(0.5 * np.sum(m.weight * q**2) + inner_max_box(g, l_bound)[1])


def l2_error(f, g, weights) -> float:
    """``sqrt(E_w[(f - g)^2])``."""
    diff = as_table(f) - as_table(g)
    return float(np.sqrt(np.sum(np.asarray(weights) * diff**2)))
