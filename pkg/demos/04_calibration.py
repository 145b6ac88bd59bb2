"""Choosing a retention percentile from a handful of measurements.

Aggregation time is modelled as a line in p and the MAPE of hotspot shares
as a logarithm. Fit both and ask for the smallest p under an error budget.

    python demos/04_calibration.py
"""
import numpy as np

from atys.calibration import CalibrationSample, Infeasible, calibrate, fit_log, solve_min_p

rng = np.random.default_rng(0)
ps = np.array([0, 25, 50, 70, 80, 90, 95, 99], dtype=float)
time_s = -1.0614 * ps + 114.44
mape = 984.368 * np.log(-0.001 * ps + 1.099)
# a little measurement noise
samples = [CalibrationSample(p, t * (1 + 0.01 * rng.standard_normal()), max(m + 0.2 * rng.standard_normal(), 0))
           for p, t, m in zip(ps, time_s, mape)]

for eps in (30, 15, 5, 1):
    rep = calibrate(samples, eps)
    print(f"eps={eps:>3}%: p*={rep['recommended_percentile']:7.3f}  "
          f"predicted MAPE={rep['predicted_mape']:6.2f}%  predicted time={rep['predicted_time']:6.2f}s")

m = rep["mape_model"]
print(f"\nfitted MAPE(p) = {m['a']:.1f} * ln({m['b']:.5f} p + {m['c']:.4f})")

# a flat curve that never gets under the budget
flat = fit_log([(50, 9.0), (80, 8.6), (99, 8.2)])
try:
    solve_min_p(flat, 5.0)
except Infeasible as exc:
    print("flat curve:", exc)
