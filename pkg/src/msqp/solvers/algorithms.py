"""End-to-end estimators: soft and hard minimax Q-estimation, plus fitted-Q iteration."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..data import Moments, OfflineDataset, moments, population_moments
from ..function_classes import (
    ClassMember,
    LinearBall,
    Singleton,
    TabularBox,
    fit_least_squares,
)
from ..mdp import BehaviorSpec, TabularMDP, validate_policy
from ..oracles import greedy_policy, softmax_policy
from .outer import (
    OuterProblem,
    OuterResult,
    SolverError,
    minimize_for_fixed_l,
    solve_exact,
    solve_gda,
    solve_subgradient,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("exact", "subgradient", "gda")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.1
    outer_steps: int = 20_000
    step_size: float = 0.01
    schedule: str = "sqrt"  # "sqrt" gives c/sqrt(t), "constant" gives c
    iterate_averaging: bool = True
    seed: int = 0
    convergence_tolerance: float = 1e-6
    optimizer: str = "exact"
    gamma: float | None = None  # None: read from the dataset provenance
    estimate_gap: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.outer_steps < 1:
            raise ValueError("outer_steps must be a positive integer")
        if self.schedule not in ("sqrt", "constant"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")

    def replace(self, **changes) -> SolverConfig:
        return SolverConfig(**{**self.__dict__, **changes})


@dataclass
class SolveResult:
    q_hat: ClassMember
    l_hat: ClassMember | None
    policy: np.ndarray
    objective_trace: list
    final_saddle_gap_estimate: float
    warnings: list = field(default_factory=list)
    method: str = ""
    alpha: float = 0.0
    optimizer: str = ""

    @property
    def q_table(self) -> np.ndarray:
        return self.q_hat.table()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "optimizer": self.optimizer,
            "q_hat": self.q_hat.to_dict(),
            "l_hat": None if self.l_hat is None else self.l_hat.to_dict(),
            "policy": self.policy.tolist(),
            "objective_trace": [float(v) for v in self.objective_trace],
            "final_saddle_gap_estimate": float(self.final_saddle_gap_estimate),
            "warnings": list(self.warnings),
        }


def _gamma(data, cfg: SolverConfig) -> float:
    if cfg.gamma is not None:
        return float(cfg.gamma)
    prov = getattr(data, "provenance", None) or {}
    if "gamma" not in prov:
        raise ValueError("discount factor unknown: set SolverConfig.gamma or use a dataset that records it")
    return float(prov["gamma"])


def _check_shapes(q_class, l_class, shape):
    for spec in (q_class, l_class):
        if isinstance(spec, LinearBall) and tuple(spec.features.shape) != tuple(shape):
            raise ValueError(f"feature map shape {spec.features.shape} does not match the MDP {shape}")
        if isinstance(spec, Singleton) and spec.table.shape != tuple(shape):
            raise ValueError(f"singleton table shape {spec.table.shape} does not match the MDP {shape}")


def _outer(problem: OuterProblem, cfg: SolverConfig) -> tuple[OuterResult, float]:
    if cfg.optimizer == "exact":
        res = solve_exact(problem)
    elif cfg.optimizer == "subgradient":
        res = solve_subgradient(problem, cfg.outer_steps, cfg.step_size, cfg.schedule, cfg.iterate_averaging)
    else:
        res = solve_gda(problem, cfg.outer_steps, cfg.step_size, cfg.schedule)
    gap = np.nan
    if cfg.estimate_gap and isinstance(problem.l_class, (TabularBox, Singleton)):
        # max_l L(q_hat, l) - min_q L(q, l_hat) >= 0, zero exactly at a saddle point
        gap = max(res.objective - minimize_for_fixed_l(problem, res.l.table()), 0.0)
        if gap > cfg.convergence_tolerance:
            res.warnings.append(f"saddle gap estimate {gap:.3g} above tolerance {cfg.convergence_tolerance:g}")
    return res, gap


def _solve_moments(m: Moments, gamma, q_class, l_class, cfg: SolverConfig, pi_b, alpha, method) -> SolveResult:
    pi_b = validate_policy(pi_b)
    _check_shapes(q_class, l_class, pi_b.shape)
    problem = OuterProblem(m, gamma, alpha, pi_b, q_class, l_class)
    res, gap = _outer(problem, cfg)
    q = res.q.table()
    if alpha > 0:
        policy = softmax_policy(q, pi_b, alpha)
    else:
        policy = greedy_policy(q, support=pi_b > 0)
    for w in res.warnings:
        log.warning("%s: %s", method, w)
    return SolveResult(
        q_hat=res.q,
        l_hat=res.l,
        policy=policy,
        objective_trace=list(res.trace),
        final_saddle_gap_estimate=float(gap),
        warnings=list(res.warnings),
        method=method,
        alpha=float(alpha),
        optimizer=cfg.optimizer,
    )


def _data_moments(data, shape) -> Moments:
    if isinstance(data, Moments):
        return data
    if data.n == 0:
        raise ValueError("cannot solve on an empty dataset")
    return moments(data, *shape)


def msqp_solve(data: OfflineDataset, q_class, l_class, cfg: SolverConfig, pi_b) -> SolveResult:
    """Soft minimax Q-estimate and its softmax policy toward ``pi_b``."""
    if not cfg.alpha > 0:
        raise ValueError("the soft estimator needs alpha > 0; use mqp_solve for alpha = 0")
    pi_b = np.asarray(pi_b, dtype=float)
    m = _data_moments(data, pi_b.shape)
    return _solve_moments(m, _gamma(data, cfg), q_class, l_class, cfg, pi_b, cfg.alpha, "msqp")


def mqp_solve(data: OfflineDataset, q_class, l_class, cfg: SolverConfig, pi_b) -> SolveResult:
    """Hard minimax Q-estimate and its greedy policy restricted to the support of ``pi_b``."""
    pi_b = np.asarray(pi_b, dtype=float)
    m = _data_moments(data, pi_b.shape)
    return _solve_moments(m, _gamma(data, cfg), q_class, l_class, cfg, pi_b, 0.0, "mqp")


def population_solve(mdp: TabularMDP, b: BehaviorSpec, q_class, l_class, cfg: SolverConfig) -> SolveResult:
    """The same estimators with exact expectations under the data distribution."""
    m = population_moments(mdp, b)
    method = "msqp-population" if cfg.alpha > 0 else "mqp-population"
    return _solve_moments(m, mdp.gamma, q_class, l_class, cfg, b.behavior_policy, cfg.alpha, method)


def fqi_solve(data: OfflineDataset, q_class, iterations: int, seed: int = 0, pi_b=None, gamma=None,
              tolerance: float = 0.0) -> SolveResult:
    """Fitted-Q iteration: regress ``r + gamma max_a' q_k(s', a')`` onto the class.

    Unvisited pairs get value 0 in the tabular class. ``seed`` is accepted for
    interface symmetry; the procedure is deterministic.
    """
    del seed
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if isinstance(q_class, TabularBox):
        shape = None
    elif isinstance(q_class, (LinearBall, Singleton)):
        shape = q_class.features.shape if isinstance(q_class, LinearBall) else q_class.table.shape
    else:
        raise TypeError(f"unsupported Q-class {type(q_class).__name__}")
    if pi_b is not None:
        pi_b = validate_policy(pi_b)
        shape = pi_b.shape
    if shape is None:
        raise ValueError("tabular fitted-Q iteration needs pi_b (or another source of the table shape)")
    gamma = _gamma(data, SolverConfig(gamma=gamma))
    m = _data_moments(data, shape)
    q = np.zeros(shape)
    member = None
    warns = []
    trace = []
    for _ in range(iterations):
        target = m.mean_reward + gamma * (m.next_dist @ q.max(axis=1))
        member = fit_least_squares(q_class, target, m.weight)
        raw = _raw_norm(q_class, target, m.weight)
        if raw > 10 * q_class.bound and not warns:
            warns.append(f"iterate norm {raw:.3g} exceeds 10x the class bound before projection (divergence)")
        nxt = member.table()
        step = float(np.max(np.abs(nxt - q)))
        trace.append(step)
        q = nxt
        if gamma == 0.0 or step <= tolerance:
            break
    unvisited = int(np.sum(m.weight == 0))
    if unvisited and isinstance(q_class, TabularBox):
        warns.append(f"{unvisited} unvisited pairs set to 0")
    support = pi_b > 0 if pi_b is not None else None
    for w in warns:
        if "divergence" in w:
            warnings.warn(w, RuntimeWarning, stacklevel=2)
    return SolveResult(
        q_hat=member,
        l_hat=None,
        policy=greedy_policy(q, support=support),
        objective_trace=trace,
        final_saddle_gap_estimate=float("nan"),
        warnings=warns,
        method="fqi",
        alpha=0.0,
        optimizer="fitted-q",
    )


def _raw_norm(spec, target, weights) -> float:
    if isinstance(spec, LinearBall):
        Phi = spec.features.matrix
        w = weights.ravel()
        theta = np.linalg.lstsq(Phi.T @ (w[:, None] * Phi), Phi.T @ (w * target.ravel()), rcond=None)[0]
        return float(np.linalg.norm(theta))
    return float(np.max(np.abs(np.where(weights > 0, target, 0.0))))


__all__ = [
    "SolveResult",
    "SolverConfig",
    "SolverError",
    "fqi_solve",
    "mqp_solve",
    "msqp_solve",
    "population_solve",
]
