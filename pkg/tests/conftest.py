import sys
import time
from pathlib import Path

import pytest

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent
CONFIGS = ROOT / "configs"
GOLDEN = HERE / "golden"

sys.path.insert(0, str(HERE))

_reports = {}
sweep_seconds = {}
acceptance_lines = {}


def sweep(name: str):
    """Run a shipped config once per session and cache the report."""
    from msqp.harness.experiment import load_config, run_experiment

    if name not in _reports:
        start = time.perf_counter()
        _reports[name] = run_experiment(load_config(CONFIGS / f"{name}.json"), threads=1)
        sweep_seconds[name] = time.perf_counter() - start
    return _reports[name]


def median_rows(report):
    return [
        (metric, n, stats["median"])
        for metric, per_n in sorted(report.summary.items())
        for n, stats in sorted(per_n.items())
    ]


@pytest.fixture(scope="session")
def sweeps():
    return sweep


def pytest_terminal_summary(terminalreporter):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(acceptance_lines):
        terminalreporter.write_line(acceptance_lines[key])
