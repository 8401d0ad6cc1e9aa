"""Volatility statistics of a gradient-norm series over an early-training window."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_WINDOW = 500

STABILITY_COLUMNS = (
    "arm", "seed", "window_start", "window_len", "std_dev", "cv_percent", "msc", "r_squared",
)


@dataclass
class GradNormSeries:
    values: np.ndarray
    start: int = 0
    length: int = DEFAULT_WINDOW

    def window(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < 0):
            raise ContractError("gradient norms must be non-negative")
        if self.start < 0 or self.start + self.length > len(v):
            raise ContractError(
                f"window [{self.start}, {self.start + self.length}) outside series of length {len(v)}"
            )
        return v[self.start : self.start + self.length]


@dataclass
class StabilityReport:
    std_dev: float
    cv_percent: float
    msc: float
    r_squared: float
    window_start: int
    window_len: int
    arm: str = ""
    seed: int = 0
    cv_undefined: bool = False


def stability_metrics(series: GradNormSeries, arm: str = "", seed: int = 0) -> StabilityReport:
    """Population std, CV (%), mean |step change|, and R^2 of a linear fit vs step."""
    if series.length < 3:
        raise ContractError("stability window needs at least 3 steps")
    g = series.window()
    mean = g.mean()
    std = float(np.sqrt(np.mean((g - mean) ** 2)))
    cv_undefined = mean == 0
    cv = 0.0 if cv_undefined else 100.0 * std / mean
    msc = float(np.mean(np.abs(np.diff(g))))
    t = np.arange(series.start, series.start + series.length, dtype=np.float64)
    tc = t - t.mean()
    slope = float(np.dot(tc, g - mean) / np.dot(tc, tc))
    resid = g - (mean + slope * tc)
    ss_tot = float(np.sum((g - mean) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot < 1e-15 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return StabilityReport(std, float(cv), msc, r2, series.start, series.length, arm, seed, cv_undefined)


@dataclass
class StabilityComparison:
    passed: bool
    means: dict
    verdicts: list
    table: str


def stability_compare(reports, stable_arm: str = "+RI", volatile_arm: str = "+FI") -> StabilityComparison:
    """Seed-averaged metrics per arm, checking ``stable_arm`` has std and CV no
    greater than ``volatile_arm``."""
    reports = list(reports)
    windows = {(r.window_start, r.window_len) for r in reports}
    if len(windows) > 1:
        raise ContractError(f"reports use different windows: {sorted(windows)}")
    by_arm: dict = {}
    for r in reports:
        by_arm.setdefault(r.arm, []).append(r)
    means = {
        arm: {
            key: float(np.mean([getattr(r, key) for r in rs]))
            for key in ("std_dev", "cv_percent", "msc", "r_squared")
        }
        for arm, rs in sorted(by_arm.items())
    }
    verdicts = []
    if stable_arm in means and volatile_arm in means:
        for key in ("std_dev", "cv_percent"):
            ok = means[stable_arm][key] <= means[volatile_arm][key]
            verdicts.append((f"{key}: {stable_arm} <= {volatile_arm}", bool(ok)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STABILITY_COLUMNS)
    for r in sorted(reports, key=lambda r: (r.arm, r.seed)):
        w.writerow([r.arm, r.seed, r.window_start, r.window_len,
                    repr(r.std_dev), repr(r.cv_percent), repr(r.msc), repr(r.r_squared)])
    passed = bool(verdicts) and all(ok for _, ok in verdicts)
    return StabilityComparison(passed, means, verdicts, buf.getvalue())


def read_grad_norms(path) -> np.ndarray:
    """Grad-norm column of a ``grad_norms.csv`` written by training."""
    with open(path) as f:
        rows = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(rows)
    return np.array([float(r["grad_norm"]) for r in reader])
