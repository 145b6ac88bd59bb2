"""Random profile and workload generators shared by the tests."""
import numpy as np

from atys.kernel import SyntheticKernel, SyntheticWorkloadConfig
from atys.profile import FoldedProfile

FRAME_ALPHABET = list("abcdefgh") + ["run loop", "java.util.Map$Entry", "relu (nn/functional.py)", "<lambda>"]


def random_counts(rng, n_records, n_threads=4, depth=(1, 6), max_count=50):
    counts = {}
    while len(counts) < n_records:
        d = int(rng.integers(depth[0], depth[1] + 1))
        path = tuple(FRAME_ALPHABET[i] for i in rng.integers(0, len(FRAME_ALPHABET), d))
        thread = f"T{int(rng.integers(0, n_threads))}"
        counts[(thread, path)] = int(rng.integers(1, max_count + 1))
    return counts


def random_profile(rng, n_records=20, **kw) -> FoldedProfile:
    return FoldedProfile.from_counts(random_counts(rng, n_records, **kw))


def layered_tree(n_biz=6, n_lib=6, biz_self=0.1):
    tree = {"main": {"self": 0.0, "children": {}}}
    leaves = []
    for b in range(n_biz):
        bn = f"biz{b}"
        tree["main"]["children"][bn] = 1.0
        tree[bn] = {"self": biz_self, "children": {}}
        for i in range(n_lib):
            ln = f"lib{b}_{i}"
            leaves.append(ln)
            tree[bn]["children"][ln] = 1.0
            tree[ln] = {"self": 1.0, "children": {}}
    return tree, leaves


def shifting_workload(seed=7, phase_windows=30, n_phases=3, hot=10) -> SyntheticWorkloadConfig:
    """Each phase makes a disjoint set of ``hot`` leaves heavy and the rest light."""
    tree, leaves = layered_tree()
    rng = np.random.default_rng(seed)
    perm = list(rng.permutation(leaves))
    phases = []
    for ph in range(n_phases):
        hot_set = set(perm[ph * hot:(ph + 1) * hot])
        weights = {leaf: (float(rng.uniform(5, 20)) if leaf in hot_set else 0.05) for leaf in leaves}
        phases.append({"duration_windows": phase_windows, "weight_overrides": weights})
    return SyntheticWorkloadConfig.from_dict({"call_tree": tree, "root": "main", "seed": seed, "phases": phases})


def zipf_thread_profile(threads=1840, samples=400_000, s=1.2, seed=11) -> FoldedProfile:
    """One window of a Zipf-threaded workload over a wide call tree (>= 50 leaf functions)."""
    tree, _ = layered_tree(n_biz=10, n_lib=8)
    cfg = SyntheticWorkloadConfig.from_dict({
        "call_tree": tree, "root": "main", "seed": seed,
        "thread_count": threads, "zipf_exponent": s,
    })
    return SyntheticKernel(cfg, 1.0).sample(samples, 0)
