"""Command-line entry point: ``msqp <subcommand> ...``.

Exit codes: 0 on success, 2 when an experiment cell failed, 3 on a bad
config or input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import export_csv, load_dataset, sample_dataset, save_dataset
from .function_classes import TabularBox, class_from_dict
from .harness.demo import DemoConfig, jsonable, partial_coverage_demo
from .harness.experiment import ConfigError, load_config, reference, run_experiment
from .harness.instances import BUILTIN, builtin
from .harness.rates import rate_fit
from .mdp import (
    BehaviorSpec,
    TabularMDP,
    dump_problem,
    load_behavior,
    load_mdp,
    occupancy,
    policy_value,
    regularized_value,
)
from .oracles import (
    SoftConfig,
    check_assumptions,
    concentrability,
    hard_backup,
    lagrange_hard,
    lagrange_soft,
    margin_profile,
    multiplier_bound,
    optimal_policy,
    soft_backup,
    soft_optimal_policy,
    soft_value_iteration,
    value_iteration,
)
from .solvers import SolverConfig, fqi_solve, mqp_solve, msqp_solve

log = logging.getLogger("msqp")

EXIT_OK, EXIT_CELL_FAILED, EXIT_CONFIG = 0, 2, 3


def _emit(doc, out):
    text = json.dumps(jsonable(doc), indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _problem(args) -> tuple[TabularMDP, BehaviorSpec]:
    if getattr(args, "builtin", None):
        mdp, b = builtin(args.builtin)
    elif getattr(args, "mdp", None):
        mdp = load_mdp(args.mdp)
        b = load_behavior(args.behavior or args.mdp)
    else:
        raise ConfigError("pass --mdp PATH or --builtin NAME")
    if getattr(args, "behavior", None) and getattr(args, "builtin", None):
        b = load_behavior(args.behavior)
    return mdp, b


def _class_arg(raw, shape, default_bound):
    if raw is None:
        doc = {"kind": "tabular_box", "bound": "auto"}
    elif Path(raw).is_file():
        doc = json.loads(Path(raw).read_text())
    else:
        doc = json.loads(raw)
    return class_from_dict(doc, shape, default_bound=default_bound)


EMIT_CHOICES = ("q_star", "q_soft", "pi_soft", "l_soft", "l_hard", "concentrability", "margin", "assumptions")


def _multiplier(fn, *args):
    try:
        return fn(*args).tolist()
    except ValueError as exc:
        return f"unavailable: {exc}"


def cmd_oracle(args) -> int:
    mdp, b = _problem(args)
    emit = set(args.emit or EMIT_CHOICES)
    q_star = value_iteration(mdp, args.tolerance)
    pi_star = optimal_policy(q_star)
    doc = {"gamma": mdp.gamma, "shape": list(mdp.shape)}
    if "q_star" in emit:
        doc["q_star"] = {
            "q": q_star.tolist(),
            "policy": pi_star.tolist(),
            "value": policy_value(mdp, pi_star),
            "bellman_residual": float(np.abs(hard_backup(mdp, q_star) - q_star).max()),
        }
    if "l_hard" in emit:
        doc["l_hard"] = {
            "l": _multiplier(lagrange_hard, mdp, b, args.tolerance, q_star),
            "bound": multiplier_bound(mdp, b, pi_star),
        }
    if "margin" in emit:
        prof = margin_profile(mdp, q_star, occupancy(mdp, pi_star), np.logspace(-3, 0, 13))
        doc["margin"] = {"cdf_points": prof.cdf_points, "fitted_beta": prof.fitted_beta, "fitted_t0": prof.fitted_t0}
    if "assumptions" in emit:
        doc["assumptions"] = [check_assumptions(mdp, b, a, args.tolerance).to_dict() for a in [0.0, *args.alpha]]
    if "concentrability" in emit:
        doc["concentrability"] = {"0.0": concentrability(mdp, b, occupancy(mdp, pi_star), TabularBox(1.0)).value}
    for alpha in args.alpha:
        key = repr(alpha)
        cfg = SoftConfig(alpha, b.behavior_policy, args.tolerance)
        q = soft_value_iteration(mdp, cfg)
        pi = soft_optimal_policy(q, cfg)
        if "q_soft" in emit:
            doc.setdefault("q_soft", {})[key] = {
                "q": q.tolist(),
                "value": policy_value(mdp, pi),
                "regularized_value": regularized_value(mdp, pi, b.behavior_policy, alpha),
                "bellman_residual": float(np.abs(soft_backup(mdp, q, b.behavior_policy, alpha) - q).max()),
            }
        if "pi_soft" in emit:
            doc.setdefault("pi_soft", {})[key] = pi.tolist()
        if "l_soft" in emit:
            doc.setdefault("l_soft", {})[key] = {
                "l": _multiplier(lagrange_soft, mdp, b, cfg, q),
                "bound": multiplier_bound(mdp, b, pi),
            }
        if "concentrability" in emit:
            doc["concentrability"][key] = concentrability(mdp, b, occupancy(mdp, pi), TabularBox(1.0)).value
    _emit(doc, args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    mdp, b = _problem(args)
    data = sample_dataset(mdp, b, args.n, args.seed, args.stream)
    save_dataset(args.out, data)
    if args.csv:
        export_csv(args.csv, data)
    log.info("wrote %d tuples to %s", data.n, args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    data = load_dataset(args.data)
    mdp = load_mdp(args.mdp) if args.mdp else None
    if args.behavior:
        b = load_behavior(args.behavior)
    elif "behavior" in data.provenance:
        b = BehaviorSpec.from_dict(data.provenance["behavior"])
    elif args.mdp:
        b = load_behavior(args.mdp)
    else:
        raise ConfigError("behavior policy unknown: pass --behavior")
    shape = b.behavior_policy.shape
    gamma = mdp.gamma if mdp is not None else data.provenance.get("gamma")
    if gamma is None:
        raise ConfigError("discount factor unknown: pass --mdp or use a dataset that records it")
    r_max = mdp.r_max if mdp is not None else 1.0
    q_cls = _class_arg(args.q_class, shape, r_max / (1.0 - gamma))
    alpha = 0.0 if args.method in ("mqp", "fqi") else args.alpha
    ref = reference(mdp, b, alpha) if mdp is not None else None
    l_default = ref.l_bound if ref is not None else None
    if args.method == "fqi":
        res = fqi_solve(data, q_cls, args.steps, args.seed, pi_b=b.behavior_policy, gamma=gamma)
    else:
        l_cls = _class_arg(args.l_class, shape, l_default)
        cfg = SolverConfig(
            alpha=alpha,
            outer_steps=args.steps,
            step_size=args.step_size,
            seed=args.seed,
            optimizer=args.optimizer,
            gamma=gamma,
        )
        solver = msqp_solve if args.method == "msqp" else mqp_solve
        res = solver(data, q_cls, l_cls, cfg, b.behavior_policy)
    doc = res.to_dict()
    if ref is not None:
        diff2 = (res.q_table - ref.q) ** 2
        J = policy_value(mdp, res.policy)
        doc["oracle"] = {
            "l2_pb": float(np.sqrt(np.sum(b.joint * diff2))),
            "l2_test": float(np.sqrt(np.sum(ref.test_measure * diff2))),
            "regret_soft": ref.value_soft - J,
            "regret_hard": ref.value_hard - J,
            "value": J,
        }
    _emit(doc, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        out = args.out
    elif cfg.output:
        # relative outputs live next to the config, like its MDP paths
        out = Path(cfg.base_dir or ".") / cfg.output
    else:
        raise ConfigError("no output directory: set 'output' in the config or pass --out")
    report = run_experiment(cfg)
    report.write(out)
    for err in report.errors:
        log.error("cell failed: %s", err)
    return EXIT_OK if report.ok else EXIT_CELL_FAILED


def _read_report_rows(path):
    import csv

    with open(path) as fh:
        return [(int(r["n"]), int(r["seed"]), float(r["alpha"]), r["metric"], float(r["value"]))
                for r in csv.DictReader(fh)]


def cmd_rate_fit(args) -> int:
    rows = _read_report_rows(args.report)
    slope, intercept, r2 = rate_fit(rows, args.metric)
    _emit({"metric": args.metric, "slope": slope, "intercept": intercept, "r_squared": r2}, args.out)
    return EXIT_OK


def cmd_check(args) -> int:
    mdp, b = _problem(args)
    if args.dump:
        dump_problem(args.dump, mdp, b)
    doc = {"valid": True, "shape": list(mdp.shape), "gamma": mdp.gamma, "assumptions": []}
    for alpha in args.alpha:
        doc["assumptions"].append(check_assumptions(mdp, b, alpha).to_dict())
    q_star = value_iteration(mdp)
    prof = margin_profile(mdp, q_star, occupancy(mdp, optimal_policy(q_star)), np.logspace(-3, 0, 13))
    doc["margin"] = {"cdf_points": prof.cdf_points, "fitted_beta": prof.fitted_beta, "fitted_t0": prof.fitted_t0}
    _emit(doc, args.out)
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = DemoConfig(n=args.n, seed=args.seed, alpha=args.alpha, covered=args.covered)
    _emit(partial_coverage_demo(cfg), args.out)
    return EXIT_OK


def _add_problem_args(p):
    p.add_argument("--mdp", help="MDP JSON file (may embed the behavior spec)")
    p.add_argument("--behavior", help="behavior spec JSON file")
    p.add_argument("--builtin", choices=sorted(BUILTIN), help="use a pinned instance instead of a file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msqp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="exact fixed points, policies and multipliers")
    _add_problem_args(p)
    p.add_argument("--alpha", type=float, action="append", default=[], help="temperature (repeatable)")
    p.add_argument("--tolerance", type=float, default=1e-11)
    p.add_argument("--emit", action="append", choices=EMIT_CHOICES, help="quantities to report (repeatable; default all)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gen-data", help="sample an offline dataset")
    _add_problem_args(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stream", type=int, default=0)
    p.add_argument("--out", required=True, help="binary dataset path")
    p.add_argument("--csv", help="also write the tuples as CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve", help="run one estimator on a dataset")
    p.add_argument("--method", choices=("msqp", "mqp", "fqi"), default="msqp")
    p.add_argument("--data", required=True)
    p.add_argument("--mdp", help="enables oracle-relative errors and automatic bounds")
    p.add_argument("--behavior")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--q-class", help="class JSON (inline or file)")
    p.add_argument("--l-class", help="class JSON (inline or file)")
    p.add_argument("--steps", type=int, default=20_000, help="outer steps, or iterations for fqi")
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("exact", "subgradient", "gda"), default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("experiment", help="run an (n, seed) sweep from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("rate-fit", help="log-log fit of per-n medians in a report")
    p.add_argument("report", help="report.csv")
    p.add_argument("--metric", default="l2_pb")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rate_fit)

    p = sub.add_parser("check", help="validate a problem and report assumption checks")
    _add_problem_args(p)
    p.add_argument("--alpha", type=float, action="append", default=[], help="temperature (repeatable; 0 = hard)")
    p.add_argument("--dump", help="also write the problem (MDP plus behavior) as JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("demo-partial-coverage", help="contextual bandit outside the data support")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--covered", action="store_true", help="control case with mu0 = P_b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"msqp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
