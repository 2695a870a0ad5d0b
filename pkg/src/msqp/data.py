"""Offline datasets of i.i.d. ``(s, a, r, s')`` tuples and their sufficient statistics.

Randomness comes from a Philox counter-based generator keyed by
``(seed, stream)``: every (seed, stream) cell is reproducible on its own, in
any order, in any process. Each tuple consumes exactly four uniforms, so a
dataset of size ``n`` is a prefix of the same cell's dataset of size ``m > n``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .mdp import BehaviorSpec, TabularMDP

MAGIC = b"MSQPDATA"
FORMAT_VERSION = 1
_COLUMNS = (("s", "<i8"), ("a", "<i8"), ("r", "<f8"), ("s_next", "<i8"))


def stream_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator whose 128-bit Philox key is ``(seed, stream)``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be nonnegative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("s", np.int64), ("a", np.int64), ("r", float), ("s_next", np.int64)):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=dtype))
        sizes = {len(self.s), len(self.a), len(self.r), len(self.s_next)}
        if len(sizes) != 1:
            raise ValueError("dataset columns have different lengths")

    @property
    def n(self) -> int:
        return len(self.s)

    def __len__(self):
        return self.n

    @property
    def tuples(self):
        return list(zip(self.s.tolist(), self.a.tolist(), self.r.tolist(), self.s_next.tolist()))

    def head(self, n: int) -> OfflineDataset:
        prov = dict(self.provenance, n=n)
        return OfflineDataset(self.s[:n], self.a[:n], self.r[:n], self.s_next[:n], prov)


def _inverse_cdf(cdf, u):
    """Row-wise inverse CDF; never returns a zero-probability index."""
    idx = (u[:, None] >= cdf).sum(axis=1)
    # float round-off can leave cdf[-1] slightly below 1
    last = cdf.shape[1] - 1 - np.argmax((np.diff(cdf, prepend=0.0) > 0)[:, ::-1], axis=1)
    return np.minimum(idx, last)


def sample_dataset(mdp: TabularMDP, b: BehaviorSpec, n: int, seed: int, stream: int = 0) -> OfflineDataset:
    """Draw ``s ~ P_b``, ``a ~ pi_b(.|s)``, ``r ~ P_r(.|s,a)``, ``s' ~ P(.|s,a)``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    u = stream_rng(seed, stream).random((n, 4))
    s_cdf = np.cumsum(b.state_marginal)[None, :]
    s = _inverse_cdf(np.broadcast_to(s_cdf, (n, s_cdf.shape[1])), u[:, 0])
    a = _inverse_cdf(np.cumsum(b.behavior_policy, axis=1)[s], u[:, 1])
    mean = mdp.reward_mean[s, a]
    if mdp.reward_noise == "deterministic" or mdp.r_max == mdp.r_min:
        r = mean.copy()
    else:
        p_high = (mean - mdp.r_min) / (mdp.r_max - mdp.r_min)
        r = np.where(u[:, 2] < p_high, mdp.r_max, mdp.r_min)
    s_next = _inverse_cdf(np.cumsum(mdp.transition, axis=2)[s, a], u[:, 3])
    provenance = {
        "mdp": mdp.digest(),
        "gamma": float(mdp.gamma),
        "behavior": b.to_dict(),
        "seed": int(seed),
        "stream": int(stream),
        "n": int(n),
    }
    return OfflineDataset(s, a, r, s_next, provenance)


def empirical_mean(data: OfflineDataset, f) -> float:
    """``E_n[f(s, a, r, s')]`` for a vectorized ``f`` (scalars broadcast)."""
    if data.n == 0:
        raise ValueError("empirical mean of an empty dataset")
    vals = np.broadcast_to(np.asarray(f(data.s, data.a, data.r, data.s_next), dtype=float), (data.n,))
    return float(np.sum(vals) / data.n)


@dataclass(frozen=True, eq=False)
class Moments:
    """Per-pair sufficient statistics, all normalized by ``n``.

    ``weight[s,a] = E_n[1{s,a}]``, ``reward_sum[s,a] = E_n[r 1{s,a}]`` and
    ``next_mass[s,a,s'] = E_n[1{s,a,s'}]``. Replacing them with ``P_b``,
    ``P_b r`` and ``P_b P`` gives the population versions.
    """

    weight: np.ndarray
    reward_sum: np.ndarray
    next_mass: np.ndarray
    n: int | None = None

    @property
    def counts(self) -> np.ndarray:
        if self.n is None:
            raise AttributeError("population moments have no counts")
        return np.rint(self.weight * self.n).astype(np.int64)

    @property
    def visited(self) -> np.ndarray:
        return self.weight > 0

    @property
    def mean_reward(self) -> np.ndarray:
        w = self.weight
        return np.where(w > 0, self.reward_sum / np.where(w > 0, w, 1.0), 0.0)

    @property
    def next_dist(self) -> np.ndarray:
        w = self.weight[..., None]
        return np.where(w > 0, self.next_mass / np.where(w > 0, w, 1.0), 0.0)


def moments(data: OfflineDataset, n_states: int | None = None, n_actions: int | None = None) -> Moments:
    if n_states is None or n_actions is None:
        if data.n == 0:
            raise ValueError("shape is required for an empty dataset")
        n_states = n_states or int(max(data.s.max(), data.s_next.max())) + 1
        n_actions = n_actions or int(data.a.max()) + 1
    S, A = n_states, n_actions
    n = data.n
    denom = max(n, 1)
    pair = data.s * A + data.a
    counts = np.bincount(pair, minlength=S * A)
    rsum = np.bincount(pair, weights=data.r, minlength=S * A)
    nxt = np.bincount(pair * S + data.s_next, minlength=S * A * S)
    return Moments(
        weight=(counts / denom).reshape(S, A),
        reward_sum=(rsum / denom).reshape(S, A),
        next_mass=(nxt / denom).reshape(S, A, S),
        n=n,
    )


def population_moments(mdp: TabularMDP, b: BehaviorSpec) -> Moments:
    Pb = b.joint
    return Moments(weight=Pb, reward_sum=Pb * mdp.reward_mean, next_mass=Pb[..., None] * mdp.transition)


def save_dataset(path, data: OfflineDataset) -> None:
    """Columnar binary: magic, header length, JSON header, then raw columns."""
    header = {
        "format": FORMAT_VERSION,
        "n": data.n,
        "columns": [list(c) for c in _COLUMNS],
        "provenance": data.provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.writelines(np.ascontiguousarray(getattr(data, name), dtype=dtype).tobytes() for name, dtype in _COLUMNS)


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a dataset file")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {header.get('format')!r}")
        n = header["n"]
        cols = {}
        for name, dtype in header["columns"]:
            cols[name] = np.frombuffer(fh.read(8 * n), dtype=dtype, count=n)
    return OfflineDataset(cols["s"], cols["a"], cols["r"], cols["s_next"], header["provenance"])


def export_csv(path, data: OfflineDataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "a", "r", "s_next"])
        writer.writerows(data.tuples)
