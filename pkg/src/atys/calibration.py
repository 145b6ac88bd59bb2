"""Fit pruning cost/error curves from pre-profiling runs and pick the retention percentile.

``T(p)`` (aggregation time) is fitted with a line, ``MAPE(p)`` with
``a * ln(b*p + c)``. The recommended percentile is the smallest ``p`` whose
predicted MAPE stays within the user's error budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class CalibrationError(ValueError):
    pass


class DegenerateInput(CalibrationError):
    pass


class DomainViolation(CalibrationError):
    pass


class Infeasible(CalibrationError):
    def __init__(self, message: str, mape_at_max: float):
        super().__init__(message)
        self.mape_at_max = mape_at_max


class NonMonotoneModel(CalibrationError):
    pass


@dataclass(frozen=True)
class CalibrationSample:
    p: float
    aggregation_time: float
    mape: float

    def __post_init__(self):
        for v in (self.p, self.aggregation_time, self.mape):
            if not math.isfinite(v):
                raise ValueError("calibration sample fields must be finite")


def _fit_mape(y: np.ndarray, yhat: np.ndarray) -> float:
    nz = y != 0
    if not nz.any():
        return 0.0
    return float(100.0 * np.mean(np.abs((y[nz] - yhat[nz]) / y[nz])))


@dataclass(frozen=True)
class LinearModel:
    slope: float
    intercept: float
    fit_mape: float = 0.0

    def __call__(self, p):
        return self.slope * np.asarray(p, dtype=float) + self.intercept


@dataclass(frozen=True)
class LogModel:
    a: float
    b: float
    c: float
    fit_mape: float = 0.0

    def __call__(self, p):
        return self.a * np.log(self.b * np.asarray(p, dtype=float) + self.c)


def _xy(points: Sequence) -> tuple:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DegenerateInput("points must be (p, y) pairs")
    if not np.isfinite(arr).all():
        raise DegenerateInput("points must be finite")
    return arr[:, 0], arr[:, 1]


def fit_linear(points: Sequence) -> LinearModel:
    """Ordinary least squares line through ``(p, y)`` points."""
    p, y = _xy(points)
    if len(p) < 2 or np.ptp(p) == 0:
        raise DegenerateInput("need at least two distinct p values")
    pm, ym = p.mean(), y.mean()
    dp = p - pm
    slope = float(np.dot(dp, y - ym) / np.dot(dp, dp))
    intercept = float(ym - slope * pm)
    return LinearModel(slope, intercept, _fit_mape(y, slope * p + intercept))


def _sse_for_ratio(p, y, r):
    """Best ``alpha + a*ln(1 + r*p)`` for a fixed ratio r = b/c; returns (sse, alpha, a)."""
    x = np.log1p(r * p)
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(np.dot(dx, dx))
    a = float(np.dot(dx, y - ym) / sxx) if sxx > 0 else 0.0
    alpha = float(ym - a * xm)
    resid = y - (alpha + a * x)
    return float(np.dot(resid, resid)), alpha, a


def fit_log(
    points: Sequence,
    b_range: tuple = (-0.01, 0.01),
    grid: int = 201,
    tol: float = 1e-6,
) -> LogModel:
    """Least-squares fit of ``y = a * ln(b*p + c)``.

    Stage one scans a (b, c) grid, solving a in closed form for each cell.
    Stage two refines around the best cell. The model family depends on b and
    c only through r = b/c once a free offset a*ln(c) is allowed, so the
    refinement golden-sections over r with a closed-form (offset, scale) pair
    and maps the optimum back to (a, b, c).
    """
    p, y = _xy(points)
    if len(p) < 3:
        raise DegenerateInput("need at least three points")
    if np.ptp(p) == 0:
        raise DegenerateInput("need at least two distinct p values")
    if (y < 0).any():
        raise DegenerateInput("MAPE values must be non-negative")
    if np.ptp(y) == 0:
        # flat curve: b -> 0 and a*ln(c) = y
        return LogModel(float(y[0]), 0.0, math.e, 0.0)

    p_lo, p_hi = float(p.min()), float(p.max())
    bs = np.linspace(b_range[0], b_range[1], grid)
    cs = np.linspace(0.05, 3.0, 60)
    best = None
    for b in bs:
        for c in cs:
            arg = b * p + c
            if (arg <= 0).any():
                continue
            x = np.log(arg)
            sxx = float(np.dot(x, x))
            if sxx == 0:
                continue
            a = float(np.dot(x, y) / sxx)
            resid = y - a * x
            sse = float(np.dot(resid, resid))
            if best is None or sse < best[0]:
                best = (sse, b, c)
    if best is None:
        raise DomainViolation("no (b, c) keeps b*p + c positive over the data")

    # admissible r keeps 1 + r*p > 0 over the data
    r_floor = -1.0 / p_hi if p_hi > 0 else -np.inf
    r_ceil = 1.0 / abs(p_lo) if p_lo < 0 else np.inf
    db = bs[1] - bs[0]
    cands = [(best[1] + s * db) / best[2] for s in (-1, 0, 1)]
    lo = max(min(cands), r_floor * (1 - 1e-12) if np.isfinite(r_floor) else -np.inf)
    hi = min(max(cands), r_ceil * (1 - 1e-12) if np.isfinite(r_ceil) else np.inf)
    # widen until the bracket holds an interior minimum or hits the domain edge
    for _ in range(60):
        f_lo = _sse_for_ratio(p, y, lo)[0]
        f_hi = _sse_for_ratio(p, y, hi)[0]
        f_mid = _sse_for_ratio(p, y, (lo + hi) / 2)[0]
        if f_mid <= min(f_lo, f_hi):
            break
        width = hi - lo
        if f_lo < f_hi:
            lo = max(lo - width, r_floor * (1 - 1e-12)) if np.isfinite(r_floor) else lo - width
        else:
            hi = min(hi + width, r_ceil * (1 - 1e-12)) if np.isfinite(r_ceil) else hi + width

    g = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
    f1, f2 = _sse_for_ratio(p, y, x1)[0], _sse_for_ratio(p, y, x2)[0]
    scale = max(1.0, abs(lo), abs(hi))
    while hi - lo > tol * tol * scale:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - g * (hi - lo)
            f1 = _sse_for_ratio(p, y, x1)[0]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + g * (hi - lo)
            f2 = _sse_for_ratio(p, y, x2)[0]
    r = (lo + hi) / 2
    sse, alpha, a = _sse_for_ratio(p, y, r)

    if sse <= best[0] and abs(a) > 0:
        c = math.exp(alpha / a)
        model = LogModel(a, float(r * c), c)
    else:
        model = LogModel(best_a(p, y, best[1], best[2]), float(best[1]), float(best[2]))
    return LogModel(model.a, model.b, model.c, _fit_mape(y, model(p)))


def best_a(p, y, b, c) -> float:
    x = np.log(b * p + c)
    return float(np.dot(x, y) / np.dot(x, x))


def solve_min_p(
    model: LogModel,
    epsilon: float,
    p_lo: float = 0.0,
    p_hi: float = 100.0,
    tol: float = 1e-6,
) -> float:
    """Smallest retention percentile whose predicted MAPE is at most ``epsilon``.

    The MAPE curve must be non-increasing on ``[p_lo, p_hi]`` (checked on a
    1000-point grid). Bisection stops at ``tol`` and returns the feasible end.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    grid = np.linspace(p_lo, p_hi, 1000)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = model(grid)
    if not np.isfinite(vals).all():
        raise NonMonotoneModel("model is undefined somewhere on the percentile domain")
    if (np.diff(vals) > 1e-9 * max(1.0, float(np.abs(vals).max()))).any():
        raise NonMonotoneModel("MAPE model must be non-increasing in p")
    at_max = float(model(p_hi))
    if at_max > epsilon:
        raise Infeasible(f"MAPE({p_hi:g}) = {at_max:.6g} exceeds epsilon {epsilon:g}", at_max)
    if float(model(p_lo)) <= epsilon:
        return p_lo
    lo, hi = p_lo, p_hi  # model(lo) > eps >= model(hi)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if float(model(mid)) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate(samples: Sequence[CalibrationSample], epsilon: float) -> dict:
    """Fit both curves and solve for the recommended percentile; returns a JSON-ready report."""
    if len(samples) < 3:
        raise DegenerateInput(f"need at least three calibration rows, got {len(samples)}")
    time_model = fit_linear([(s.p, s.aggregation_time) for s in samples])
    mape_model = fit_log([(s.p, s.mape) for s in samples])
    report = {
        "time_model": {
            "kind": "linear",
            "slope": time_model.slope,
            "intercept": time_model.intercept,
            "fit_mape": time_model.fit_mape,
        },
        "mape_model": {
            "kind": "log",
            "a": mape_model.a,
            "b": mape_model.b,
            "c": mape_model.c,
            "fit_mape": mape_model.fit_mape,
        },
        "epsilon": epsilon,
    }
    p_star = solve_min_p(mape_model, epsilon)
    report["recommended_percentile"] = p_star
    report["predicted_mape"] = float(mape_model(p_star))
    report["predicted_time"] = float(time_model(p_star))
    return report


def read_samples_csv(text: str, source: str = "<csv>") -> list:
    """Parse ``p,time_seconds,mape_percent`` rows; a non-numeric first row is a header."""
    import csv
    import io

    rows = []
    for i, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise CalibrationError(f"{source}:{i}: expected 3 columns, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            if i == 1:
                continue
            raise CalibrationError(f"{source}:{i}: non-numeric value in {row!r}") from None
        try:
            rows.append(CalibrationSample(*vals))
        except ValueError as exc:
            raise CalibrationError(f"{source}:{i}: {exc}") from None
    return rows
