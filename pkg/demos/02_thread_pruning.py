"""Thread pruning on a heavy-tailed workload.

Most samples come from a few threads. Keeping the threads that cover p% of
samples drops the long tail and barely moves the top-50 function shares.

    python demos/02_thread_pruning.py
"""
import time

from atys import flamegraph as fg
from atys.fsp import mape_top_n, prune, rank_threads
from atys.kernel import SyntheticKernel, SyntheticWorkloadConfig

tree = {"main": {"self": 0.0, "children": {}}}
for b in range(10):
    tree["main"]["children"][f"biz{b}"] = 1.0
    tree[f"biz{b}"] = {"self": 0.1, "children": {f"lib{b}_{i}": 1.0 + i for i in range(8)}}

cfg = SyntheticWorkloadConfig.from_dict({
    "call_tree": tree, "root": "main", "seed": 3, "thread_count": 1840, "zipf_exponent": 1.2})
profile = SyntheticKernel(cfg, 1.0).sample(400_000, 0)

ranking = rank_threads(profile)
print("threads:", len(ranking.entries), "samples:", ranking.total_samples)
print("busiest five:", ranking.entries[:5])

print(f"\n{'p':>5} {'kept':>6} {'share':>7} {'MAPE top-50':>12} {'build s':>8}")
for p in (80, 90, 95, 99, 100):
    pruned, rep = prune(profile, p)
    t0 = time.perf_counter()
    fg.build(pruned)
    dt = time.perf_counter() - t0
    print(f"{p:5d} {rep.retained_threads:6d} {rep.retained_sample_share:7.3f} "
          f"{mape_top_n(profile, pruned, 50):11.3f}% {dt:8.3f}")
