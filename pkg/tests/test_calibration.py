import math

import numpy as np
import pytest

from atys.calibration import (
    CalibrationError,
    CalibrationSample,
    DegenerateInput,
    Infeasible,
    LinearModel,
    LogModel,
    NonMonotoneModel,
    calibrate,
    fit_linear,
    fit_log,
    read_samples_csv,
    solve_min_p,
)

from oracles import log_model_min_p

# fitted curves reported for the pre-profiling runs
T_SLOPE, T_INTERCEPT = -1.0614, 114.44
M_A, M_B, M_C = 984.368, -0.001, 1.099
REF_MAPE = LogModel(M_A, M_B, M_C)
GRID = [0, 50, 80, 90, 95, 99]


def test_fit_linear_exact():
    m = fit_linear([(p, 2 * p + 1) for p in range(10)])
    assert m.slope == pytest.approx(2, abs=1e-9) and m.intercept == pytest.approx(1, abs=1e-9)
    m = fit_linear([(1, 3), (4, 9)])
    assert (m.slope, m.intercept) == pytest.approx((2, 1))


def test_fit_linear_recovers_reported_time_model():
    m = fit_linear([(p, T_SLOPE * p + T_INTERCEPT) for p in GRID])
    assert m.slope == pytest.approx(T_SLOPE, abs=1e-6)
    assert m.intercept == pytest.approx(T_INTERCEPT, abs=1e-6)
    assert m.fit_mape < 1e-9


def test_fit_linear_degenerate():
    with pytest.raises(DegenerateInput):
        fit_linear([(1, 1)])
    with pytest.raises(DegenerateInput):
        fit_linear([(1, 1), (1, 2)])


def test_fit_log_reproduces_reported_mape_model():
    pts = [(p, float(REF_MAPE(p))) for p in GRID]
    m = fit_log(pts)
    ps = np.linspace(0, 99, 991)
    rmse = float(np.sqrt(np.mean((m(ps) - REF_MAPE(ps)) ** 2)))
    assert rmse <= 1e-3


def test_fit_log_flat_curve():
    m = fit_log([(p, 4.2) for p in (10, 20, 30, 40)])
    assert m.b == 0.0
    assert m(np.array([0, 55, 100])) == pytest.approx([4.2, 4.2, 4.2])
    assert m.fit_mape == 0.0


def test_fit_log_sign_follows_slope():
    rising = [(p, 3 * math.log(0.02 * p + 1.5)) for p in (0, 20, 40, 60, 80)]
    assert fit_log(rising).b > 0
    falling = [(p, float(REF_MAPE(p))) for p in GRID]
    assert fit_log(falling).b < 0


def test_fit_log_noisy_points_stay_close():
    rng = np.random.default_rng(0)
    ps = np.array([50, 60, 70, 80, 85, 90, 95, 99], dtype=float)
    ys = REF_MAPE(ps) * (1 + rng.normal(0, 0.01, ps.size))
    m = fit_log(list(zip(ps, ys)))
    assert np.max(np.abs(m(ps) - REF_MAPE(ps))) < 3.0


def test_fit_log_degenerate():
    with pytest.raises(DegenerateInput):
        fit_log([(1, 1), (2, 0.5)])
    with pytest.raises(DegenerateInput):
        fit_log([(1, 1), (1, 2), (1, 3)])
    with pytest.raises(DegenerateInput):
        fit_log([(1, -1), (2, 2), (3, 3)])


def test_solve_min_p_closed_form():
    expected = log_model_min_p(M_A, M_B, M_C, 15.0)
    assert expected == pytest.approx(83.6451, abs=1e-4)
    assert solve_min_p(REF_MAPE, 15.0) == pytest.approx(expected, abs=1e-3)
    assert solve_min_p(REF_MAPE, 1e-9) == pytest.approx(99.0, abs=0.01)


def test_solve_min_p_boundaries():
    zero = LogModel(0.0, 0.0, 1.0)
    assert solve_min_p(zero, 1.0) == 0.0
    with pytest.raises(Infeasible) as ei:
        solve_min_p(LogModel(10.0, 0.0, math.e), 5.0)
    assert ei.value.mape_at_max == pytest.approx(10.0)
    with pytest.raises(NonMonotoneModel):
        solve_min_p(LogModel(1.0, 0.01, 1.0), 0.5)
    with pytest.raises(ValueError):
        solve_min_p(REF_MAPE, 0.0)


def test_solve_min_p_result_is_feasible_and_tight():
    for eps in (1, 5, 15, 50, 90):
        p = solve_min_p(REF_MAPE, eps)
        assert REF_MAPE(p) <= eps
        assert REF_MAPE(p - 1e-3) > eps
    # MAPE(0) is about 93, so a looser budget needs no retention at all
    assert solve_min_p(REF_MAPE, 150) == 0.0


def test_calibrate_report():
    samples = [CalibrationSample(p, T_SLOPE * p + T_INTERCEPT, float(REF_MAPE(p))) for p in GRID]
    rep = calibrate(samples, 15.0)
    assert rep["recommended_percentile"] == pytest.approx(log_model_min_p(M_A, M_B, M_C, 15.0), abs=1e-3)
    assert rep["predicted_mape"] <= 15.0
    assert rep["time_model"]["slope"] == pytest.approx(T_SLOPE, abs=1e-6)
    with pytest.raises(DegenerateInput):
        calibrate(samples[:2], 15.0)


def test_models_are_callable_on_arrays():
    assert LinearModel(2, 1)(np.array([0, 1])) == pytest.approx([1, 3])
    assert float(REF_MAPE(99)) == pytest.approx(0.0, abs=1e-9)


def test_read_samples_csv():
    rows = read_samples_csv("p,time_seconds,mape_percent\n90,18.9,2.1\n\n99,9.4,0.5\n")
    assert rows == [CalibrationSample(90, 18.9, 2.1), CalibrationSample(99, 9.4, 0.5)]
    with pytest.raises(CalibrationError, match="3 columns"):
        read_samples_csv("90,1\n")
    with pytest.raises(CalibrationError, match=":2:"):
        read_samples_csv("90,1,2\nx,1,2\n")
    with pytest.raises(CalibrationError):
        read_samples_csv("90,1,nan\n")
