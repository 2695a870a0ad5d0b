"""Hypothesis classes for Q-functions and Lagrange multipliers.

Two variants: a box of tables ``0 <= f <= B`` and a Euclidean ball of linear
coefficients ``||theta||_2 <= B`` over a fixed feature map. ``Singleton``
pins a class to one known table, which is handy for sanity runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (S, A, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3:
            raise ValueError(f"feature table must be (S, A, d), got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature table has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(-1, self.dimension)

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> FeatureMap:
        return cls(np.eye(n_states * n_actions).reshape(n_states, n_actions, -1))


@dataclass(frozen=True, eq=False)
class TabularBox:
    bound: float
    lower: float = 0.0

    def __post_init__(self):
        if not self.bound > self.lower:
            raise ValueError("box bound must exceed its lower edge")


@dataclass(frozen=True, eq=False)
class LinearBall:
    features: FeatureMap
    bound: float
    nonneg: bool = False

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("ball radius must be positive")


@dataclass(frozen=True, eq=False)
class Singleton:
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

    @property
    def bound(self) -> float:
        return float(np.abs(self.table).max())


@dataclass(frozen=True, eq=False)
class ClassMember:
    spec: object
    params: np.ndarray

    def table(self) -> np.ndarray:
        spec = self.spec
        if isinstance(spec, LinearBall):
            out = spec.features.values @ self.params
            # clamped-linear members are only used on the multiplier side
            return np.maximum(out, 0.0) if spec.nonneg else out
        return np.asarray(self.params, dtype=float)

    def to_dict(self) -> dict:
        kind = "coefficients" if isinstance(self.spec, LinearBall) else "table"
        return {kind: self.params.tolist(), "values": self.table().tolist()}


def evaluate(member: ClassMember, s=None, a=None):
    """Member value at ``(s, a)``; the full table when indices are omitted."""
    table = member.table()
    if s is None and a is None:
        return table
    S, A = table.shape
    if not (0 <= s < S and 0 <= a < A):
        raise IndexError(f"pair ({s}, {a}) outside a {S}x{A} table")
    return float(table[s, a])


def project(spec, raw) -> ClassMember:
    """Euclidean projection of raw parameters onto the class."""
    raw = np.asarray(raw, dtype=float)
    if isinstance(spec, TabularBox):
        return ClassMember(spec, np.clip(raw, spec.lower, spec.bound))
    if isinstance(spec, LinearBall):
        norm = np.linalg.norm(raw)
        return ClassMember(spec, raw * (spec.bound / norm) if norm > spec.bound else raw.copy())
    if isinstance(spec, Singleton):
        return ClassMember(spec, spec.table.copy())
    raise TypeError(f"unknown class spec {type(spec).__name__}")


def initial_member(spec) -> ClassMember:
    """Deterministic feasible start: mid-box, zero coefficients, or the singleton."""
    if isinstance(spec, TabularBox):
        raise TypeError("tabular boxes need a table shape; use initial_table")
    if isinstance(spec, LinearBall):
        return ClassMember(spec, np.zeros(spec.features.dimension))
    return ClassMember(spec, spec.table.copy())


def initial_table(spec, shape) -> ClassMember:
    if isinstance(spec, TabularBox):
        return ClassMember(spec, np.full(shape, 0.5 * (spec.lower + spec.bound)))
    return initial_member(spec)


def contains(spec, f, tol=1e-9) -> bool:
    """Whether the table ``f`` is representable in the class up to ``tol``."""
    f = np.asarray(f, dtype=float)
    if isinstance(spec, TabularBox):
        return bool(np.all(f >= spec.lower - tol) and np.all(f <= spec.bound + tol))
    if isinstance(spec, Singleton):
        return bool(np.max(np.abs(f - spec.table)) <= tol)
    if isinstance(spec, LinearBall):
        Phi = spec.features.matrix
        theta, *_ = np.linalg.lstsq(Phi, f.ravel(), rcond=None)
        resid = np.max(np.abs(Phi @ theta - f.ravel())) if f.size else 0.0
        return bool(resid <= tol and np.linalg.norm(theta) <= spec.bound * (1 + tol) + tol)
    raise TypeError(f"unknown class spec {type(spec).__name__}")


def fit_least_squares(spec, targets, weights) -> ClassMember:
    """Weighted least-squares fit of a table onto the class, then projection.

    Used by fitted-Q iteration. Pairs with zero weight get value 0 in the
    tabular case.
    """
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if isinstance(spec, TabularBox):
        return project(spec, np.where(weights > 0, targets, 0.0))
    if isinstance(spec, LinearBall):
        Phi = spec.features.matrix
        w = weights.ravel()
        gram = Phi.T @ (w[:, None] * Phi)
        rhs = Phi.T @ (w * targets.ravel())
        theta = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        return project(spec, theta)
    return project(spec, None)


def class_from_dict(doc: dict, shape=None, base_dir=None, default_bound=None):
    """Build a class spec from its experiment-config JSON form.

    ``bound`` may be a number or ``"auto"`` (then ``default_bound`` is used).
    ``features`` is ``"one_hot"``, an inline nested list, or a path to a JSON
    file holding an ``(S, A, d)`` nested list.
    """
    kind = doc["kind"]
    bound = doc.get("bound", "auto")
    if bound == "auto" or bound is None:
        if default_bound is None:
            raise ValueError(f"{kind} class needs an explicit bound")
        bound = default_bound
    bound = float(bound)
    if kind == "tabular_box":
        return TabularBox(bound)
    if kind == "linear_ball":
        feats = doc.get("features", "one_hot")
        if feats == "one_hot":
            if shape is None:
                raise ValueError("one-hot features need the MDP shape")
            fmap = FeatureMap.one_hot(*shape)
        elif isinstance(feats, str):
            path = Path(feats)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            fmap = FeatureMap(json.loads(path.read_text()))
        else:
            fmap = FeatureMap(feats)
        return LinearBall(fmap, bound, bool(doc.get("nonneg", False)))
    if kind == "singleton":
        return Singleton(doc["table"])
    raise ValueError(f"unknown class kind {kind!r}")


def class_to_dict(spec) -> dict:
    if isinstance(spec, TabularBox):
        return {"kind": "tabular_box", "bound": spec.bound}
    if isinstance(spec, LinearBall):
        return {"kind": "linear_ball", "bound": spec.bound, "nonneg": spec.nonneg,
                "features": spec.features.values.tolist()}
    return {"kind": "singleton", "table": spec.table.tolist()}
