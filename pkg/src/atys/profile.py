"""Folded stack profiles: parsing, serialization and per-function summaries.

A folded line looks like ``[thread;]frame;frame;...;leaf count``. Frames are
opaque strings (they may contain spaces, e.g. ``relu (torch/nn/functional.py)``),
so the count is split off at the last space.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

DEFAULT_THREAD = "all"

StackPath = tuple  # tuple[str, ...], root first, leaf last


class MalformedLine(ValueError):
    def __init__(self, line_no: int, reason: str, line: str = ""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class NonPositiveFrequency(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TraceRecord:
    thread: str
    path: tuple
    count: int

    def __post_init__(self):
        if not self.path:
            raise ValueError("stack path must have at least one frame")
        for frame in self.path:
            if not frame or ";" in frame or "\n" in frame or "\r" in frame:
                raise ValueError(f"invalid frame name {frame!r}")
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass(frozen=True)
class ProfileMeta:
    service: str = ""
    instance: str = ""
    frequency_hz: float = 1.0
    window_seconds: float = 1.0
    window_index: int = 0


@dataclass(frozen=True)
class FoldedProfile:
    """One window of counted stack traces. Always canonical: sorted, no duplicate keys."""

    records: tuple = ()
    meta: ProfileMeta = field(default_factory=ProfileMeta)

    @classmethod
    def from_counts(cls, counts: Mapping[tuple, int], meta: ProfileMeta | None = None) -> "FoldedProfile":
        """Build from a ``{(thread, path): count}`` mapping; zero counts are dropped."""
        records = tuple(
            TraceRecord(thread, path, n)
            for (thread, path), n in sorted(counts.items())
            if n > 0
        )
        return cls(records, meta or ProfileMeta())

    @classmethod
    def from_records(cls, records: Iterable[TraceRecord], meta: ProfileMeta | None = None) -> "FoldedProfile":
        counts: dict = defaultdict(int)
        for r in records:
            counts[(r.thread, r.path)] += r.count
        return cls.from_counts(counts, meta)

    @property
    def total_samples(self) -> int:
        return sum(r.count for r in self.records)

    @property
    def threads(self) -> list:
        return sorted({r.thread for r in self.records})

    def with_meta(self, **changes) -> "FoldedProfile":
        from dataclasses import replace

        return FoldedProfile(self.records, replace(self.meta, **changes))

    def __len__(self):
        return len(self.records)


def parse_folded(text: str, thread_aware: bool = False, meta: ProfileMeta | None = None) -> FoldedProfile:
    """Parse collapsed-stack text into a canonical profile.

    With ``thread_aware`` the first frame of each line names the thread;
    otherwise every record is attributed to :data:`DEFAULT_THREAD`.
    Duplicate (thread, path) lines are summed.
    """
    counts: dict = defaultdict(int)
    # only \n ends a line; splitlines() would also break on \x1e, \u2028, ...
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        stack, sep, count_text = line.rpartition(" ")
        if not sep or not stack:
            raise MalformedLine(line_no, "missing count", line)
        try:
            count = int(count_text)
        except ValueError:
            raise MalformedLine(line_no, "non-integer count", line) from None
        if count <= 0:
            raise MalformedLine(line_no, "count must be positive", line)
        frames = stack.split(";")
        if any(not f for f in frames):
            raise MalformedLine(line_no, "empty frame", line)
        if thread_aware:
            if len(frames) < 2:
                raise MalformedLine(line_no, "thread without frames", line)
            thread, path = frames[0], tuple(frames[1:])
        else:
            thread, path = DEFAULT_THREAD, tuple(frames)
        counts[(thread, path)] += count
    return FoldedProfile.from_counts(counts, meta)


def serialize_folded(profile: FoldedProfile, thread_aware: bool = True) -> str:
    """Emit one line per record in canonical order.

    ``thread_aware=False`` drops the thread frame and sums records that then
    share a path.
    """
    if thread_aware:
        return "".join(f"{r.thread};{';'.join(r.path)} {r.count}\n" for r in profile.records)
    counts: dict = defaultdict(int)
    for r in profile.records:
        counts[r.path] += r.count
    return "".join(f"{';'.join(p)} {n}\n" for p, n in sorted(counts.items()))


@dataclass(frozen=True)
class FunctionStats:
    self_samples: int = 0
    inclusive_samples: int = 0


def function_totals(profile: FoldedProfile) -> dict:
    """Map function name -> :class:`FunctionStats`.

    Self samples go to the leaf frame. A function appearing several times on
    one path (recursion) counts once toward its inclusive total.
    """
    self_counts: dict = defaultdict(int)
    incl_counts: dict = defaultdict(int)
    for r in profile.records:
        self_counts[r.path[-1]] += r.count
        for name in set(r.path):
            incl_counts[name] += r.count
    return {
        name: FunctionStats(self_counts.get(name, 0), incl)
        for name, incl in sorted(incl_counts.items())
    }


def cpu_time_seconds(samples: int, frequency_hz: float) -> float:
    if not frequency_hz > 0:
        raise NonPositiveFrequency(f"frequency must be positive, got {frequency_hz}")
    return samples / frequency_hz


@dataclass(frozen=True)
class HotspotDistribution:
    shares: dict
    k: int
    window_index: int = 0

    def __bool__(self):
        return bool(self.shares)


def top_functions(self_samples: Mapping[str, int], k: int) -> list:
    """Names of the k largest positive counts, ties broken by name ascending."""
    ranked = sorted(((-n, name) for name, n in self_samples.items() if n > 0))
    return [name for _, name in ranked[:k]]


def hotspot_distribution(totals: Mapping[str, FunctionStats], k: int, window_index: int = 0) -> HotspotDistribution:
    if k < 1:
        raise ValueError("k must be >= 1")
    selfs = {name: st.self_samples for name, st in totals.items()}
    top = top_functions(selfs, k)
    total = sum(selfs[name] for name in top)
    shares = {name: selfs[name] / total for name in top} if total else {}
    return HotspotDistribution(shares, k, window_index)
