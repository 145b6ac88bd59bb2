"""Thread-level pruning: keep the busiest threads covering a sample percentile."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .profile import FoldedProfile, function_totals, top_functions

DEFAULT_PERCENTILE = 99.0


class EmptyProfile(ValueError):
    pass


@dataclass(frozen=True)
class ThreadRanking:
    entries: tuple  # ((thread, samples), ...) samples-descending, name-ascending ties
    total_samples: int

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class PruneReport:
    coverage_percentile: float
    retained_threads: int
    discarded_threads: int
    retained_sample_share: float

    def as_dict(self) -> dict:
        return {
            "coverage_percentile": self.coverage_percentile,
            "retained_threads": self.retained_threads,
            "discarded_threads": self.discarded_threads,
            "retained_sample_share": self.retained_sample_share,
        }


def rank_threads(profile: FoldedProfile) -> ThreadRanking:
    per_thread: dict = defaultdict(int)
    for r in profile.records:
        per_thread[r.thread] += r.count
    entries = tuple(sorted(per_thread.items(), key=lambda kv: (-kv[1], kv[0])))
    return ThreadRanking(entries, sum(per_thread.values()))


def coverage_prefix(ranking: ThreadRanking, percentile: float) -> int:
    """Length of the shortest ranking prefix whose samples reach ``percentile``% of the total."""
    need = percentile * ranking.total_samples
    cum = 0
    for i, (_, n) in enumerate(ranking.entries, start=1):
        cum += n
        if cum * 100 >= need:
            return i
    return len(ranking.entries)


def prune(profile: FoldedProfile, percentile: float = DEFAULT_PERCENTILE):
    """Drop every thread outside the minimal prefix covering ``percentile``% of samples.

    Returns ``(pruned_profile, PruneReport)``. ``percentile=100`` keeps all records.
    """
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    ranking = rank_threads(profile)
    if ranking.total_samples == 0:
        raise EmptyProfile("cannot prune a profile without samples")
    keep_n = coverage_prefix(ranking, percentile)
    kept = {t for t, _ in ranking.entries[:keep_n]}
    if keep_n == len(ranking):
        pruned = profile
        kept_samples = ranking.total_samples
    else:
        records = tuple(r for r in profile.records if r.thread in kept)
        pruned = FoldedProfile(records, profile.meta)
        kept_samples = sum(n for _, n in ranking.entries[:keep_n])
    report = PruneReport(
        coverage_percentile=float(percentile),
        retained_threads=keep_n,
        discarded_threads=len(ranking) - keep_n,
        retained_sample_share=kept_samples / ranking.total_samples,
    )
    return pruned, report


def self_shares(profile: FoldedProfile) -> dict:
    totals = function_totals(profile)
    n = sum(st.self_samples for st in totals.values())
    if n == 0:
        return {}
    return {f: st.self_samples / n for f, st in totals.items() if st.self_samples}


def mape_top_n(reference: FoldedProfile, pruned: FoldedProfile, n: int) -> float:
    """Mean absolute percentage error of the reference's top-n self shares.

    Functions missing from ``pruned`` count as share 0 (a 100% error each).
    """
    ref = self_shares(reference)
    if not ref:
        raise EmptyProfile("reference profile has no samples")
    got = self_shares(pruned)
    top = top_functions(ref, n)
    return 100.0 / len(top) * sum(abs(ref[f] - got.get(f, 0.0)) / ref[f] for f in top)
