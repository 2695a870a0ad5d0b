"""Outer minimization of ``max_l L(q, l)`` over a Q-class.

With a box multiplier class the inner max is ``B_L * sum max(g, 0)``, so the
outer problem is a convex program in ``q`` (``g`` is convex in ``q`` because the
soft envelope and the hard max are). Three routes:

* ``exact``: the epigraph form ``min E[q^2]/2 + B_L sum t, t >= g, t >= 0``
  handed to a conic solver. The duals of ``t >= g`` are the maximizing
  multiplier ``l_hat``, which lands strictly inside the box at the saddle.
* ``subgradient``: projected subgradient descent with uniform averaging.
* ``gda``: simultaneous projected gradient descent-ascent, for multiplier
  classes without a closed-form inner max (experimental).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from ..data import Moments
from ..function_classes import (
    ClassMember,
    LinearBall,
    Singleton,
    TabularBox,
    initial_table,
    project,
)
from ..oracles import greedy_policy, softmax_policy
from .losses import empirical_lagrangian, outer_objective, residual

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OuterProblem:
    moments: Moments
    gamma: float
    alpha: float
    pi_b: np.ndarray
    q_class: object
    l_class: object

    @property
    def shape(self):
        return self.pi_b.shape


@dataclass
class OuterResult:
    q: ClassMember
    l: ClassMember
    objective: float
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


# -- exact conic route --------------------------------------------------------


def _q_expression(spec, shape):
    if isinstance(spec, TabularBox):
        var = cp.Variable(shape)
        return var, var, [var >= spec.lower, var <= spec.bound]
    if isinstance(spec, LinearBall):
        theta = cp.Variable(spec.features.dimension)
        expr = cp.reshape(spec.features.matrix @ theta, shape, order="C")
        return theta, expr, [cp.norm(theta, 2) <= spec.bound]
    if isinstance(spec, Singleton):
        return None, cp.Constant(spec.table), []
    raise TypeError(f"unsupported Q-class {type(spec).__name__}")


def _residual_expression(problem: OuterProblem, q_expr):
    m, alpha, pi_b = problem.moments, problem.alpha, problem.pi_b
    S, A = problem.shape
    needed = np.flatnonzero(m.next_mass.sum(axis=(0, 1)) > 0)
    pieces = []
    for s in needed:
        if alpha > 0:
            supp = np.flatnonzero(pi_b[s] > 0)
            pieces.append(alpha * cp.log_sum_exp(q_expr[s, supp] / alpha + np.log(pi_b[s, supp])))
        else:
            pieces.append(cp.max(q_expr[s, :]))
    g = m.reward_sum - cp.multiply(m.weight, q_expr)
    if len(pieces):
        flow = m.next_mass[:, :, needed].reshape(S * A, len(needed))
        g = g + problem.gamma * cp.reshape(flow @ cp.hstack(pieces), (S, A), order="C")
    return g


def _solve(prob: cp.Problem):
    # reduced accuracy is reported through the status and the result warnings
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        try:
            prob.solve(solver=cp.CLARABEL)
        except cp.error.SolverError:
            pass
        if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            # badly scaled cones (very large alpha) can stall the interior-point method
            try:
                prob.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)
            except cp.error.SolverError:
                pass
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(f"conic solve ended with status {prob.status}")
    return prob.status


def _member(spec, var, shape):
    if isinstance(spec, Singleton):
        return ClassMember(spec, spec.table.copy())
    # interior-point output can sit 1e-10 outside the feasible set
    return project(spec, np.asarray(var.value, dtype=float).reshape(shape if isinstance(spec, TabularBox) else -1))


def solve_exact(problem: OuterProblem) -> OuterResult:
    shape = problem.shape
    var, q_expr, cons = _q_expression(problem.q_class, shape)
    g = _residual_expression(problem, q_expr)
    quad = 0.5 * cp.sum(cp.multiply(problem.moments.weight, cp.square(q_expr)))
    l_spec = problem.l_class
    warns = []
    if isinstance(l_spec, TabularBox):
        if l_spec.lower != 0:
            raise SolverError("the closed-form inner max needs a multiplier box starting at 0")
        t = cp.Variable(shape, nonneg=True)
        epi = t >= g
        prob = cp.Problem(cp.Minimize(quad + l_spec.bound * cp.sum(t)), cons + [epi])
        status = _solve(prob)
        l_hat = np.clip(np.asarray(epi.dual_value, dtype=float).reshape(shape), 0.0, l_spec.bound)
    elif isinstance(l_spec, Singleton):
        l_fixed = l_spec.table
        if np.any(l_fixed < 0):
            raise SolverError("a fixed multiplier must be nonnegative for the problem to be convex")
        prob = cp.Problem(cp.Minimize(quad + cp.sum(cp.multiply(l_fixed, g))), cons)
        status = _solve(prob)
        l_hat = l_fixed.copy()
    else:
        raise SolverError("exact route needs a box or singleton multiplier class; use optimizer='gda'")
    if status == cp.OPTIMAL_INACCURATE:
        warns.append("conic solver reported reduced accuracy")
    q = _member(problem.q_class, var, shape)
    obj = _objective(problem, q.table(), l_hat)
    return OuterResult(q=q, l=ClassMember(l_spec, l_hat), objective=obj, trace=[obj], warnings=warns)


def minimize_for_fixed_l(problem: OuterProblem, l_table) -> float:
    """``min_{q in Q} L(q, l)`` for a fixed nonnegative ``l``."""
    fixed = OuterProblem(problem.moments, problem.gamma, problem.alpha, problem.pi_b,
                         problem.q_class, Singleton(np.clip(l_table, 0.0, None)))
    res = solve_exact(fixed)
    return empirical_lagrangian(res.q, res.l, problem.moments, problem.alpha, problem.pi_b, problem.gamma)


def _objective(problem: OuterProblem, q_table, l_hat=None) -> float:
    """Outer objective ``max_{l in L} L(q, l)`` for box or singleton ``L``."""
    l_spec = problem.l_class
    if isinstance(l_spec, TabularBox):
        return outer_objective(q_table, problem.moments, problem.alpha, problem.pi_b, problem.gamma, l_spec.bound)
    if isinstance(l_spec, Singleton):
        return empirical_lagrangian(q_table, l_spec.table, problem.moments, problem.alpha, problem.pi_b, problem.gamma)
    return empirical_lagrangian(q_table, l_hat, problem.moments, problem.alpha, problem.pi_b, problem.gamma)


# -- first-order routes -------------------------------------------------------


def _backup_weights(q, alpha, pi_b):
    """d V_q(s) / d q(s, a): softmax weights, or the lowest-index argmax."""
    if alpha > 0:
        return softmax_policy(q, pi_b, alpha)
    return greedy_policy(q)


def _table_gradient(problem: OuterProblem, q, lam):
    """Gradient in ``q`` of ``L(q, lam)`` (a subgradient for the hard max)."""
    m = problem.moments
    inflow = np.einsum("sa,sat->t", lam, m.next_mass)
    return m.weight * q - lam * m.weight + problem.gamma * inflow[:, None] * _backup_weights(q, problem.alpha, problem.pi_b)


def _to_params(spec, grad_table):
    if isinstance(spec, LinearBall):
        return spec.features.matrix.T @ grad_table.ravel()
    return grad_table


def _start(spec, shape):
    if isinstance(spec, (TabularBox, LinearBall, Singleton)):
        return initial_table(spec, shape)
    raise TypeError(f"unsupported class {type(spec).__name__}")


def _step(step_size, schedule, t):
    return step_size / np.sqrt(t) if schedule == "sqrt" else step_size


def _plateau_warning(trace):
    if len(trace) >= 10:
        cut = int(0.8 * len(trace))
        if trace[-1] >= trace[cut]:
            return "step size too large: objective did not decrease over the last 20% of steps"
    return None


def solve_subgradient(problem: OuterProblem, steps, step_size, schedule="sqrt", averaging=True) -> OuterResult:
    spec, l_spec = problem.q_class, problem.l_class
    if not isinstance(l_spec, (TabularBox, Singleton)):
        raise SolverError("subgradient route needs a box or singleton multiplier class")
    shape = problem.shape
    cur = _start(spec, shape)
    avg = cur.params.copy()
    lam_avg = np.zeros(shape)
    best_obj, best, best_lam = np.inf, cur, lam_avg
    trace = []
    for t in range(1, steps + 1):
        q = cur.table()
        if isinstance(l_spec, TabularBox):
            lam = np.where(residual(q, problem.moments, problem.alpha, problem.pi_b, problem.gamma) > 0, l_spec.bound, 0.0)
        else:
            lam = l_spec.table
        grad = _to_params(spec, _table_gradient(problem, q, lam))
        cur = project(spec, cur.params - _step(step_size, schedule, t) * grad)
        avg += (cur.params - avg) / t
        lam_avg += (lam - lam_avg) / t
        member = ClassMember(spec, avg.copy()) if averaging else cur
        obj = _objective(problem, member.table())
        trace.append(obj)
        if obj < best_obj:
            best_obj, best, best_lam = obj, member, lam_avg.copy()
    warns = [w for w in [_plateau_warning(trace)] if w]
    for w in warns:
        warnings.warn(w, RuntimeWarning, stacklevel=2)
    return OuterResult(q=best, l=ClassMember(l_spec, best_lam), objective=best_obj, trace=trace, warnings=warns)


def solve_gda(problem: OuterProblem, steps, step_size, schedule="sqrt") -> OuterResult:
    """Projected gradient descent-ascent on ``L(q, l)`` with averaged iterates."""
    q_spec, l_spec = problem.q_class, problem.l_class
    shape = problem.shape
    q_cur, l_cur = _start(q_spec, shape), _start(l_spec, shape)
    if isinstance(l_spec, LinearBall):
        l_cur = ClassMember(l_spec, np.zeros(l_spec.features.dimension))
    q_avg, l_avg = q_cur.params.copy(), l_cur.params.copy()
    trace = []
    for t in range(1, steps + 1):
        q, lam = q_cur.table(), l_cur.table()
        g = residual(q, problem.moments, problem.alpha, problem.pi_b, problem.gamma)
        grad_q = _to_params(q_spec, _table_gradient(problem, q, lam))
        if isinstance(l_spec, LinearBall) and l_spec.nonneg:
            active = (l_spec.features.values @ l_cur.params) > 0
            grad_l = l_spec.features.matrix.T @ np.where(active, g, 0.0).ravel()
        else:
            grad_l = _to_params(l_spec, g)
        eta = _step(step_size, schedule, t)
        q_cur = project(q_spec, q_cur.params - eta * grad_q)
        l_cur = project(l_spec, l_cur.params + eta * grad_l)
        q_avg += (q_cur.params - q_avg) / t
        l_avg += (l_cur.params - l_avg) / t
        trace.append(empirical_lagrangian(ClassMember(q_spec, q_avg), ClassMember(l_spec, l_avg),
                                          problem.moments, problem.alpha, problem.pi_b, problem.gamma))
    q_fin, l_fin = ClassMember(q_spec, q_avg.copy()), ClassMember(l_spec, l_avg.copy())
    return OuterResult(q=q_fin, l=l_fin, objective=trace[-1] if trace else np.nan, trace=trace,
                       warnings=["descent-ascent mode carries no saddle-point guarantee"])
