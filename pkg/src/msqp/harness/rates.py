"""Log-log rate fits and trend checks on per-n medians."""

from __future__ import annotations

import numpy as np
from scipy import stats


def rate_fit_medians(ns, medians) -> dict:
    """Least-squares line through ``(log n, log median)``.

    Needs at least three grid points and strictly positive medians.
    """
    ns = np.asarray(ns, dtype=float)
    med = np.asarray(medians, dtype=float)
    if len(ns) != len(med):
        raise ValueError("grid and medians differ in length")
    if len(ns) < 3:
        raise ValueError(f"rate fit needs at least 3 grid points, got {len(ns)}")
    if np.any(~np.isfinite(med)) or np.any(med <= 0):
        raise ValueError("rate fit needs positive finite medians")
    if np.any(ns <= 0):
        raise ValueError("grid points must be positive")
    x, y = np.log(ns), np.log(med)
    if np.ptp(y) == 0:
        # linregress reports nan for r on a flat line
        return {"slope": 0.0, "intercept": float(y[0]), "r_squared": 1.0}
    fit = stats.linregress(x, y)
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r_squared": float(fit.rvalue**2)}


def rate_fit(report, metric: str) -> tuple[float, float, float]:
    """``(slope, intercept, r_squared)`` of a report's per-n medians for ``metric``.

    ``report`` is an :class:`ExperimentReport` or an iterable of
    ``(n, seed, alpha, metric, value, ...)`` rows.
    """
    rows = report.rows if hasattr(report, "rows") else list(report)
    by_n = {}
    for row in rows:
        if row[3] == metric and np.isfinite(row[4]):
            by_n.setdefault(int(row[0]), []).append(float(row[4]))
    if not by_n:
        raise ValueError(f"no rows for metric {metric!r}")
    ns = sorted(by_n)
    fit = rate_fit_medians(ns, [np.median(by_n[n]) for n in ns])
    return fit["slope"], fit["intercept"], fit["r_squared"]


def inversions(values, increasing: bool = False) -> int:
    """Adjacent pairs that break a nonincreasing (or nondecreasing) trend."""
    v = np.asarray(values, dtype=float)
    steps = np.diff(v)
    return int(np.sum(steps < 0) if increasing else np.sum(steps > 0))
