"""Drift-driven sampling frequency on a workload whose hotspots move.

Every 30 windows a different set of leaf functions gets hot. The controller
backs off while the top-10 distribution is stable and jumps back up when it
shifts. Compare the sample bill and the share error with always sampling at
the ceiling.

    python demos/03_adaptive_frequency.py
"""
import numpy as np

from atys.fda import FdaConfig, FrequencyState, StableShareEstimator, next_frequency
from atys.kernel import SyntheticKernel, SyntheticWorkloadConfig
from atys.profile import function_totals, hotspot_distribution

rng = np.random.default_rng(7)
tree = {"main": {"self": 0.0, "children": {}}}
leaves = []
for b in range(6):
    tree["main"]["children"][f"biz{b}"] = 1.0
    tree[f"biz{b}"] = {"self": 0.1, "children": {}}
    for i in range(6):
        leaf = f"lib{b}_{i}"
        leaves.append(leaf)
        tree[f"biz{b}"]["children"][leaf] = 1.0
        tree[leaf] = {"self": 1.0, "children": {}}

order = list(rng.permutation(leaves))
phases = []
for ph in range(3):
    hot = set(order[ph * 10:(ph + 1) * 10])
    phases.append({"duration_windows": 30,
                   "weight_overrides": {x: (float(rng.uniform(5, 20)) if x in hot else 0.05) for x in leaves}})
workload = SyntheticWorkloadConfig.from_dict({"call_tree": tree, "root": "main", "seed": 7, "phases": phases})
conf = FdaConfig(theta=0.5, lambda_=0.8, stable_windows_required=5, f_min_hz=10, f_max_hz=10_000)


def run(adaptive, windows=120):
    k = SyntheticKernel(workload, 10.0).start(conf.f_max_hz)
    st, est = FrequencyState(conf.f_max_hz), StableShareEstimator()
    total, sq, freqs = 0, [], []
    for w in range(windows):
        window = k.poll_window()
        freqs.append(window.meta.frequency_hz)
        total += window.total_samples
        totals = function_totals(window)
        counts = {f: s.self_samples for f, s in totals.items() if s.self_samples}
        truth = workload.leaf_shares(workload.phase_at(w))
        top = sorted(truth, key=lambda f: -truth[f])[:10]
        if adaptive:
            st, f_next = next_frequency(st, hotspot_distribution(totals, conf.k, w), conf)
            est.update(counts, st.last_divergence is not None and st.last_divergence > conf.theta)
            k.set_frequency(f_next)
            shares = est.shares()
        else:
            n = sum(counts.values())
            shares = {f: c / n for f, c in counts.items()}
        sq.extend((shares.get(f, 0.0) - truth[f]) ** 2 for f in top)
    return total, float(np.mean(sq)), freqs


fda_total, fda_mse, freqs = run(True)
const_total, const_mse, _ = run(False)
print("frequency per window (Hz):")
for i in range(0, len(freqs), 15):
    print("  ", " ".join(f"{f:6.0f}" for f in freqs[i:i + 15]))
print(f"\nsamples: adaptive {fda_total:,} vs constant {const_total:,} -> {fda_total / const_total:.1%}")
print(f"top-10 share MSE: adaptive {fda_mse:.2e} vs constant {const_mse:.2e} -> x{fda_mse / const_mse:.2f}")
