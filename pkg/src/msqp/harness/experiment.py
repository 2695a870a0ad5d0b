"""Seeded (n, seed) sweeps with exact oracle-relative metrics.

A config is a JSON document::

    {
      "name": "benchmark-msqp",
      "mdp": {"builtin": "benchmark"},          # or a path to an MDP JSON file
      "behavior": null,                         # path; optional for builtins or embedded behavior
      "method": "msqp",                         # msqp | mqp | fqi
      "n_grid": [500, 2000, 8000, 32000],
      "seeds": [0, 1, 2],
      "alpha_rule": {"kind": "fixed", "alpha": 0.1},   # or {"kind": "schedule", "c": 1.0}
      "q_class": {"kind": "tabular_box", "bound": "auto"},
      "l_class": {"kind": "tabular_box", "bound": "auto"},
      "solver": {"optimizer": "exact"},
      "fqi_iterations": 200,
      "metrics": ["l2_pb", "l2_test", "regret_soft", "regret_hard", "value"],
      "record_timing": true,
      "output": "runs/benchmark"                 # relative to the config file
    }

Every expectation in a metric is computed exactly from the model; nothing is
Monte Carlo apart from the dataset itself.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import sample_dataset
from ..function_classes import class_from_dict
from ..mdp import (
    BehaviorSpec,
    TabularMDP,
    load_behavior,
    load_mdp,
    occupancy,
    policy_value,
    regularized_value,
)
from ..oracles import (
    SoftConfig,
    multiplier_bound,
    optimal_policy,
    soft_optimal_policy,
    soft_value_iteration,
    test_distribution,
    value_iteration,
)
from ..solvers import SolverConfig, fqi_solve, mqp_solve, msqp_solve
from .instances import builtin

log = logging.getLogger(__name__)

METHODS = ("msqp", "mqp", "fqi")
METRICS = ("l2_pb", "l2_test", "regret_soft", "regret_hard", "value", "regret_soft_regularized")
DEFAULT_METRICS = ("l2_pb", "l2_test", "regret_soft", "regret_hard", "value")
SCHEDULE_EXPONENT = -1.0 / 8.0
THREADS_ENV = "MSQP_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mdp: TabularMDP
    behavior: BehaviorSpec
    method: str
    n_grid: list
    seeds: list
    alpha_rule: dict
    q_class: dict
    l_class: dict
    solver: dict = field(default_factory=dict)
    metrics: list = field(default_factory=lambda: list(DEFAULT_METRICS))
    fqi_iterations: int = 200
    record_timing: bool = True
    output: str | None = None
    name: str = "experiment"
    base_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.n_grid or any(int(n) != n or n < 1 for n in self.n_grid):
            raise ConfigError("n_grid must be a nonempty list of positive integers")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n_grid must be strictly increasing")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a nonempty list of distinct integers")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        kind = self.alpha_rule.get("kind")
        if kind == "fixed":
            if self.method == "msqp" and not float(self.alpha_rule.get("alpha", 0)) > 0:
                raise ConfigError("msqp needs a positive fixed alpha")
        elif kind == "schedule":
            if not float(self.alpha_rule.get("c", 1.0)) > 0:
                raise ConfigError("schedule constant c must be positive")
        else:
            raise ConfigError(f"alpha_rule kind must be 'fixed' or 'schedule', got {kind!r}")
        try:
            SolverConfig(**{k: v for k, v in self.solver.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver block: {exc}") from exc

    def alpha_for(self, n: int) -> float:
        if self.method != "msqp":
            return 0.0
        if self.alpha_rule["kind"] == "fixed":
            return float(self.alpha_rule["alpha"])
        return float(self.alpha_rule.get("c", 1.0)) * n**SCHEDULE_EXPONENT


def _resolve(path, base_dir):
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


def config_from_dict(doc: dict, base_dir=None) -> ExperimentConfig:
    try:
        src = doc["mdp"]
        if isinstance(src, dict) and "builtin" in src:
            kwargs = {k: v for k, v in src.items() if k != "builtin"}
            mdp, b = builtin(src["builtin"], **kwargs)
        else:
            mdp_path = _resolve(src, base_dir)
            mdp = load_mdp(mdp_path)
            b = load_behavior(_resolve(doc.get("behavior") or mdp_path, base_dir))
        if isinstance(src, dict) and doc.get("behavior"):
            b = load_behavior(_resolve(doc["behavior"], base_dir))
        return ExperimentConfig(
            mdp=mdp,
            behavior=b,
            method=doc.get("method", "msqp"),
            n_grid=[int(n) for n in doc["n_grid"]],
            seeds=[int(s) for s in doc["seeds"]],
            alpha_rule=dict(doc.get("alpha_rule", {"kind": "fixed", "alpha": 0.1})),
            q_class=dict(doc.get("q_class", {"kind": "tabular_box", "bound": "auto"})),
            l_class=dict(doc.get("l_class", {"kind": "tabular_box", "bound": "auto"})),
            solver=dict(doc.get("solver", {})),
            metrics=list(doc.get("metrics", DEFAULT_METRICS)),
            fqi_iterations=int(doc.get("fqi_iterations", 200)),
            record_timing=bool(doc.get("record_timing", True)),
            output=doc.get("output"),
            name=doc.get("name", "experiment"),
            base_dir=None if base_dir is None else str(base_dir),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"invalid experiment config: {exc!r}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)


# -- oracle references --------------------------------------------------------


@dataclass
class Reference:
    """Ground truth for one temperature (``alpha = 0`` is the unregularized problem)."""

    alpha: float
    q: np.ndarray
    policy: np.ndarray
    q_hard: np.ndarray
    policy_hard: np.ndarray
    value_hard: float
    value_soft: float
    value_soft_reg: float
    test_measure: np.ndarray
    l_bound: float


def reference(mdp: TabularMDP, b: BehaviorSpec, alpha: float) -> Reference:
    q_hard = value_iteration(mdp)
    pi_hard = optimal_policy(q_hard)
    if alpha > 0:
        cfg = SoftConfig(alpha, b.behavior_policy)
        q = soft_value_iteration(mdp, cfg)
        pi = soft_optimal_policy(q, cfg)
    else:
        q, pi = q_hard, pi_hard
    J_pi = policy_value(mdp, pi)
    return Reference(
        alpha=alpha,
        q=q,
        policy=pi,
        q_hard=q_hard,
        policy_hard=pi_hard,
        value_hard=policy_value(mdp, pi_hard),
        value_soft=J_pi,
        value_soft_reg=regularized_value(mdp, pi, b.behavior_policy, alpha) if alpha > 0 else J_pi,
        test_measure=test_distribution(occupancy(mdp, pi), b.behavior_policy),
        l_bound=multiplier_bound(mdp, b, pi),
    )


def q_bound(mdp: TabularMDP) -> float:
    return mdp.r_max / (1.0 - mdp.gamma)


def build_classes(cfg: ExperimentConfig, ref: Reference):
    shape = cfg.mdp.shape
    base = cfg.base_dir
    q_cls = class_from_dict(cfg.q_class, shape, base, default_bound=q_bound(cfg.mdp))
    l_cls = class_from_dict(cfg.l_class, shape, base, default_bound=ref.l_bound)
    return q_cls, l_cls


# -- cells -------------------------------------------------------------------


def _metrics(cfg: ExperimentConfig, ref: Reference, q_hat, policy) -> dict:
    mdp, b = cfg.mdp, cfg.behavior
    diff2 = (q_hat - ref.q) ** 2
    out = {}
    J = None
    for name in cfg.metrics:
        if name == "l2_pb":
            out[name] = float(np.sqrt(np.sum(b.joint * diff2)))
        elif name == "l2_test":
            out[name] = float(np.sqrt(np.sum(ref.test_measure * diff2)))
        else:
            if J is None:
                J = policy_value(mdp, policy)
            if name == "regret_soft":
                out[name] = ref.value_soft - J
            elif name == "regret_hard":
                out[name] = ref.value_hard - J
            elif name == "value":
                out[name] = J
            elif name == "regret_soft_regularized":
                if ref.alpha > 0:
                    out[name] = ref.value_soft_reg - regularized_value(mdp, policy, b.behavior_policy, ref.alpha)
                else:
                    out[name] = ref.value_soft - J
    return out


def _solve(cfg: ExperimentConfig, data, q_cls, l_cls, alpha, seed):
    pi_b = cfg.behavior.behavior_policy
    if cfg.method == "fqi":
        return fqi_solve(data, q_cls, cfg.fqi_iterations, seed, pi_b=pi_b, gamma=cfg.mdp.gamma)
    scfg = SolverConfig(**{**cfg.solver, "alpha": alpha, "seed": seed, "gamma": cfg.mdp.gamma})
    if cfg.method == "msqp":
        return msqp_solve(data, q_cls, l_cls, scfg, pi_b)
    return mqp_solve(data, q_cls, l_cls, scfg, pi_b)


def run_cell(cfg: ExperimentConfig, ref: Reference, n: int, seed: int) -> list:
    """Rows ``(n, seed, alpha, metric, value, wall_ms)`` for one grid cell."""
    alpha = cfg.alpha_for(n)
    start = time.perf_counter()
    data = sample_dataset(cfg.mdp, cfg.behavior, n, seed)
    q_cls, l_cls = build_classes(cfg, ref)
    res = _solve(cfg, data, q_cls, l_cls, alpha, seed)
    values = _metrics(cfg, ref, res.q_table, res.policy)
    wall = (time.perf_counter() - start) * 1e3 if cfg.record_timing else 0.0
    return [(n, seed, alpha, name, values[name], wall) for name in cfg.metrics]


def _cell_job(args):
    cfg, ref, n, seed = args
    try:
        return run_cell(cfg, ref, n, seed), None
    except Exception as exc:  # noqa: BLE001  a failed cell must not stop the sweep
        return [], f"n={n} seed={seed}: {type(exc).__name__}: {exc}"


# -- report ------------------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: list
    summary: dict
    rate_fits: dict
    errors: list = field(default_factory=list)
    config_name: str = "experiment"

    @property
    def ok(self) -> bool:
        return not self.errors

    def values(self, metric: str, n: int | None = None) -> np.ndarray:
        return np.array([r[4] for r in self.rows if r[3] == metric and (n is None or r[0] == n)])

    def medians(self, metric: str) -> dict:
        return {int(n): v["median"] for n, v in self.summary[metric].items()}

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "seed", "alpha", "metric", "value", "wall_ms"])
        for n, seed, alpha, metric, value, wall in self.rows:
            writer.writerow([n, seed, repr(float(alpha)), metric, repr(float(value)), f"{wall:.3f}"])
        return buf.getvalue()

    def summary_doc(self) -> dict:
        return {
            "name": self.config_name,
            "summary": {m: {str(n): v for n, v in per_n.items()} for m, per_n in self.summary.items()},
            "rate_fits": self.rate_fits,
            "errors": self.errors,
        }

    def write(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.csv").write_text(self.csv_text())
        (outdir / "summary.json").write_text(json.dumps(self.summary_doc(), indent=1, sort_keys=True) + "\n")


def summarize(rows, metrics, n_grid) -> dict:
    out = {}
    for metric in metrics:
        per_n = {}
        for n in n_grid:
            vals = np.array([r[4] for r in rows if r[3] == metric and r[0] == n and np.isfinite(r[4])])
            if len(vals) == 0:
                continue
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            per_n[int(n)] = {"median": float(med), "q1": float(q1), "q3": float(q3), "count": len(vals)}
        out[metric] = per_n
    return out


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> ExperimentReport:
    from .rates import rate_fit_medians

    refs = {}
    jobs = []
    for n in cfg.n_grid:
        alpha = cfg.alpha_for(n)
        if alpha not in refs:
            refs[alpha] = reference(cfg.mdp, cfg.behavior, alpha)
        for seed in cfg.seeds:
            jobs.append((cfg, refs[alpha], n, seed))

    threads = _threads() if threads is None else threads
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = [_cell_job(job) for job in jobs]

    rows, errors = [], []
    for (_, _, n, seed), (cell_rows, err) in zip(jobs, results):
        if err is not None:
            log.error("cell failed: %s", err)
            errors.append(err)
            rows.append((n, seed, cfg.alpha_for(n), "error", math.nan, 0.0))
        rows.extend(cell_rows)

    summary = summarize(rows, cfg.metrics, cfg.n_grid)
    fits = {}
    for metric in cfg.metrics:
        meds = summary[metric]
        try:
            fits[metric] = rate_fit_medians(list(meds), [meds[n]["median"] for n in meds])
        except ValueError as exc:
            fits[metric] = {"error": str(exc)}
    return ExperimentReport(rows, summary, fits, errors, cfg.name)
