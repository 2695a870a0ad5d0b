"""Exact tabular MDP machinery.

Everything here is computed by dense linear solves over the ``S*A`` joint
index, so sizes are capped at ``MAX_PAIRS`` state-action pairs. Policies and
Q-functions are plain ``(S, A)`` float arrays; the dataclasses below only
wrap objects that carry more than one table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MAX_PAIRS = 10_000
VALIDATION_TOL = 1e-12
IDENTITY_TOL = 1e-10
SERIAL_VERSION = 1

NOISE_KINDS = ("deterministic", "two_point")


class InvalidMDPError(ValueError):
    """Raised when an MDP, policy or behavior spec breaks an invariant."""


class SupportError(ValueError):
    """Raised when a policy puts mass outside the behavior policy's support."""


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray  # (S, A, S')
    reward_mean: np.ndarray  # (S, A)
    gamma: float
    mu0: np.ndarray
    r_min: float = 0.0
    r_max: float = 1.0
    reward_noise: str = "two_point"

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "reward_mean", np.asarray(self.reward_mean, dtype=float))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_min", float(self.r_min))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_states, self.n_actions

    def replace(self, **changes) -> TabularMDP:
        fields = {
            "transition": self.transition,
            "reward_mean": self.reward_mean,
            "gamma": self.gamma,
            "mu0": self.mu0,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "reward_noise": self.reward_noise,
        }
        fields.update(changes)
        return TabularMDP(**fields)

    def to_dict(self) -> dict:
        return {
            "version": SERIAL_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward_mean": self.reward_mean.tolist(),
            "reward_noise": {"kind": self.reward_noise},
            "gamma": self.gamma,
            "mu0": self.mu0.tolist(),
            "r_min": self.r_min,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TabularMDP:
        if doc.get("version") != SERIAL_VERSION:
            raise InvalidMDPError(f"unsupported MDP document version {doc.get('version')!r}")
        noise = doc.get("reward_noise", {"kind": "two_point"})
        mdp = cls(
            transition=doc["transition"],
            reward_mean=doc["reward_mean"],
            gamma=doc["gamma"],
            mu0=doc["mu0"],
            r_min=doc["r_min"],
            r_max=doc["r_max"],
            reward_noise=noise["kind"] if isinstance(noise, dict) else noise,
        )
        if mdp.transition.shape[:2] != (doc["n_states"], doc["n_actions"]):
            raise InvalidMDPError("n_states/n_actions disagree with the transition tensor")
        validate_mdp(mdp)
        return mdp

    def digest(self) -> str:
        """Short content hash used in dataset provenance."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class BehaviorSpec:
    """Data-generating distribution ``P_b(s, a) = P_b(s) * pi_b(a|s)``."""

    state_marginal: np.ndarray
    behavior_policy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state_marginal", np.asarray(self.state_marginal, dtype=float))
        object.__setattr__(self, "behavior_policy", np.asarray(self.behavior_policy, dtype=float))

    @property
    def joint(self) -> np.ndarray:
        return self.state_marginal[:, None] * self.behavior_policy

    @property
    def support(self) -> np.ndarray:
        return self.joint > 0

    def to_dict(self) -> dict:
        return {
            "state_marginal": self.state_marginal.tolist(),
            "behavior_policy": self.behavior_policy.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> BehaviorSpec:
        return cls(doc["state_marginal"], doc["behavior_policy"])


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    dist: np.ndarray  # (S, A), sums to one
    generating_policy: np.ndarray
    initial: np.ndarray

    @property
    def state_marginal(self) -> np.ndarray:
        return self.dist.sum(axis=1)


class DensityRatio(NamedTuple):
    ratio: np.ndarray
    sup: float
    sup_on_support: float


def _index(row) -> tuple:
    return tuple(int(i) for i in row)


def _check_distribution(vec, name, tol=VALIDATION_TOL):
    vec = np.asarray(vec, dtype=float)
    if np.any(~np.isfinite(vec)):
        raise InvalidMDPError(f"{name} has non-finite entries")
    neg = np.argwhere(vec < 0)
    if len(neg):
        raise InvalidMDPError(f"{name} has negative entry at {_index(neg[0])}")
    total = vec.sum(axis=-1)
    bad = np.argwhere(np.abs(np.atleast_1d(total) - 1.0) > tol)
    if len(bad):
        idx = _index(bad[0])
        raise InvalidMDPError(f"{name} row not stochastic at {idx}: sums to {float(np.atleast_1d(total)[idx])!r}")


def validate_mdp(mdp: TabularMDP) -> None:
    """Raise ``InvalidMDPError`` naming the first broken invariant."""
    P = mdp.transition
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise InvalidMDPError(f"transition must have shape (S, A, S), got {P.shape}")
    S, A = mdp.shape
    if S * A > MAX_PAIRS:
        raise InvalidMDPError(f"S*A = {S * A} exceeds the dense-solve cap of {MAX_PAIRS}")
    if mdp.reward_mean.shape != (S, A):
        raise InvalidMDPError(f"reward_mean must have shape {(S, A)}, got {mdp.reward_mean.shape}")
    if mdp.mu0.shape != (S,):
        raise InvalidMDPError(f"mu0 must have shape {(S,)}, got {mdp.mu0.shape}")
    if not 0.0 <= mdp.gamma < 1.0:
        raise InvalidMDPError(f"gamma must lie in [0, 1), got {mdp.gamma}")
    if mdp.reward_noise not in NOISE_KINDS:
        raise InvalidMDPError(f"unknown reward_noise kind {mdp.reward_noise!r}")
    _check_distribution(P, "transition")
    _check_distribution(mdp.mu0, "mu0")
    if mdp.r_min < 0:
        raise InvalidMDPError(f"r_min must be nonnegative, got {mdp.r_min}")
    if mdp.r_max < mdp.r_min:
        raise InvalidMDPError(f"r_max {mdp.r_max} below r_min {mdp.r_min}")
    low = np.argwhere(mdp.reward_mean < mdp.r_min)
    if len(low):
        raise InvalidMDPError(f"reward below r_min at {_index(low[0])}")
    high = np.argwhere(mdp.reward_mean > mdp.r_max)
    if len(high):
        raise InvalidMDPError(f"reward above r_max at {_index(high[0])}")


def validate_policy(pi, shape=None) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2 or (shape is not None and pi.shape != tuple(shape)):
        raise InvalidMDPError(f"policy must have shape {shape}, got {pi.shape}")
    _check_distribution(pi, "policy")
    return pi


def validate_behavior(b: BehaviorSpec, mdp: TabularMDP | None = None) -> None:
    if mdp is not None:
        if b.state_marginal.shape != (mdp.n_states,):
            raise InvalidMDPError("behavior state_marginal has the wrong length")
        validate_policy(b.behavior_policy, mdp.shape)
    else:
        validate_policy(b.behavior_policy)
    _check_distribution(b.state_marginal, "behavior state_marginal")


def policy_transition(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Joint-index operator ``M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')``.

    ``M @ f`` is the one-step look-ahead ``E[f(s', a')]``; ``M.T @ d`` pushes a
    state-action distribution forward by one step.
    """
    S, A = mdp.shape
    M = mdp.transition[:, :, :, None] * pi[None, None, :, :]
    return M.reshape(S * A, S * A)


def initial_pairs(pi: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """Start distribution over pairs; a 2-D ``initial`` is taken as already joint."""
    initial = np.asarray(initial, dtype=float)
    if initial.ndim == 2:
        return initial
    return initial[:, None] * pi


def occupancy(mdp: TabularMDP, pi: np.ndarray, initial=None) -> OccupancyMeasure:
    """Normalized discounted occupancy ``(1-g)(I - g M^T)^{-1} mu(s) pi(a|s)``.

    ``initial`` defaults to ``mdp.mu0``. Passing an ``(S, A)`` table starts the
    chain from that state-action distribution instead (e.g. ``P_b`` itself).
    """
    if initial is None:
        initial = mdp.mu0
    initial = np.asarray(initial, dtype=float)
    start = initial_pairs(pi, initial).ravel()
    M = policy_transition(mdp, pi)
    n = M.shape[0]
    d = (1.0 - mdp.gamma) * np.linalg.solve(np.eye(n) - mdp.gamma * M.T, start)
    # solve noise can leave -1e-17 entries
    d = np.clip(d, 0.0, None).reshape(mdp.shape)
    return OccupancyMeasure(dist=d, generating_policy=pi, initial=initial)


def policy_q(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    M = policy_transition(mdp, pi)
    n = M.shape[0]
    q = np.linalg.solve(np.eye(n) - mdp.gamma * M, mdp.reward_mean.ravel())
    return q.reshape(mdp.shape)


def policy_value(mdp: TabularMDP, pi: np.ndarray) -> float:
    """``J(pi) = sum_{s,a} mu0(s) pi(a|s) Q^pi(s,a)``."""
    return float(np.sum(initial_pairs(pi, mdp.mu0) * policy_q(mdp, pi)))


def _log_ratio(pi, pi_b):
    with np.errstate(divide="ignore"):
        out = np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)) - np.log(np.where(pi_b > 0, pi_b, 1.0)), 0.0)
    return out


def kl_gap(mdp: TabularMDP, pi: np.ndarray, pi_b: np.ndarray) -> float:
    """``(1-g)^{-1} E_{d_pi}[log pi/pi_b]``, the KL part of the regularized value."""
    if np.any((pi > 0) & (pi_b <= 0)):
        raise SupportError("policy not absolutely continuous w.r.t. behavior")
    d = occupancy(mdp, pi).dist
    return float(np.sum(d * _log_ratio(pi, pi_b)) / (1.0 - mdp.gamma))


def regularized_value(mdp: TabularMDP, pi: np.ndarray, pi_b: np.ndarray, alpha: float) -> float:
    """KL-penalized value ``J(pi) - alpha * kl_gap``.

    Evaluated through the occupancy measure so both terms share the same
    discounting.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if np.any((pi > 0) & (pi_b <= 0)):
        raise SupportError("policy not absolutely continuous w.r.t. behavior")
    d = occupancy(mdp, pi).dist
    per_pair = mdp.reward_mean - alpha * _log_ratio(pi, pi_b)
    return float(np.sum(d * per_pair) / (1.0 - mdp.gamma))


def flattened_policy(pi_b: np.ndarray) -> np.ndarray:
    """Uniform over each state's supported actions."""
    support = np.asarray(pi_b) > 0
    sizes = support.sum(axis=1)
    empty = np.flatnonzero(sizes == 0)
    if len(empty):
        raise InvalidMDPError(f"behavior policy has empty support at state {empty[0]}")
    return support / sizes[:, None]


def density_ratio(d, b) -> DensityRatio:
    """Elementwise ``d / P_b`` with ``x/0 = inf`` for ``x > 0`` and ``0/0 = 0``.

    ``d`` may be an :class:`OccupancyMeasure` or a raw table; ``b`` a
    :class:`BehaviorSpec` or a raw ``P_b(s, a)`` table.
    """
    num = d.dist if isinstance(d, OccupancyMeasure) else np.asarray(d, dtype=float)
    den = b.joint if isinstance(b, BehaviorSpec) else np.asarray(b, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    on_support = ratio[den > 0]
    return DensityRatio(
        ratio=ratio,
        sup=float(ratio.max()),
        sup_on_support=float(on_support.max()) if on_support.size else 0.0,
    )


def dump_problem(path, mdp: TabularMDP, behavior: BehaviorSpec | None = None) -> None:
    doc = mdp.to_dict()
    if behavior is not None:
        doc["behavior"] = behavior.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_mdp(path) -> TabularMDP:
    with open(path) as fh:
        return TabularMDP.from_dict(json.load(fh))


def load_behavior(path) -> BehaviorSpec:
    """Read a behavior spec, either standalone or embedded under ``behavior``."""
    with open(path) as fh:
        doc = json.load(fh)
    return BehaviorSpec.from_dict(doc.get("behavior", doc))
