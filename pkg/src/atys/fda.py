"""Adaptive sampling frequency driven by hotspot drift between windows.

Each window's top-k self-share distribution is compared with the previous
one by Jensen-Shannon divergence (base 2, so values lie in [0, 1]). A drift
above ``theta`` raises the frequency by ``1/lambda_``; a run of more than
``stable_windows_required`` quiet windows lowers it by ``lambda_``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

from .profile import HotspotDistribution


class NegativeShare(ValueError):
    pass


@dataclass(frozen=True)
class FdaConfig:
    theta: float = 0.5
    lambda_: float = 0.8
    stable_windows_required: int = 5
    k: int = 10
    f_min_hz: float = 10.0
    f_max_hz: float = 10_000.0

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not 0 < self.lambda_ < 1:
            raise ValueError(f"lambda_ must lie in (0, 1), got {self.lambda_}")
        if self.stable_windows_required < 1:
            raise ValueError("stable_windows_required must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.f_min_hz < self.f_max_hz:
            raise ValueError("need 0 < f_min_hz < f_max_hz")

    def clamp(self, f: float) -> float:
        return min(max(f, self.f_min_hz), self.f_max_hz)


@dataclass(frozen=True)
class FrequencyState:
    frequency_hz: float
    stable_count: int = 0
    last_distribution: HotspotDistribution | None = None
    last_divergence: float | None = None


def _aligned(p: Mapping[str, float], q: Mapping[str, float]):
    for name, v in list(p.items()) + list(q.items()):
        if v < 0:
            raise NegativeShare(f"share of {name!r} is negative: {v}")
    keys = sorted(set(p) | set(q))
    ps = sum(p.values())
    qs = sum(q.values())
    a = [p.get(k, 0.0) / ps for k in keys] if ps > 0 else []
    b = [q.get(k, 0.0) / qs for k in keys] if qs > 0 else []
    return a, b


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits between two share maps.

    Accepts :class:`HotspotDistribution` or plain ``{name: share}`` mappings.
    Supports are aligned on their union with zeros and each side is
    renormalized. Two empty inputs give 0; exactly one empty input gives 1.
    """
    p = p.shares if isinstance(p, HotspotDistribution) else p
    q = q.shares if isinstance(q, HotspotDistribution) else q
    a, b = _aligned(p, q)
    if not a and not b:
        return 0.0
    if not a or not b:
        return 1.0
    kl_a = kl_b = 0.0
    for x, y in zip(a, b):
        # x/m written as 2x/(x+y): (x+y)/2 underflows for subnormal shares
        s = x + y
        if x > 0:
            kl_a += x * math.log2(2 * x / s)
        if y > 0:
            kl_b += y * math.log2(2 * y / s)
    return min(max(0.5 * kl_a + 0.5 * kl_b, 0.0), 1.0)


def advance(state: FrequencyState, divergence: float, config: FdaConfig) -> FrequencyState:
    """One controller step given this window's divergence from the previous one."""
    f = state.frequency_hz
    if divergence > config.theta:
        return replace(state, frequency_hz=config.clamp(f / config.lambda_), stable_count=0)
    count = state.stable_count + 1
    if count > config.stable_windows_required:
        return replace(state, frequency_hz=config.clamp(f * config.lambda_), stable_count=0)
    return replace(state, frequency_hz=config.clamp(f), stable_count=count)


def next_frequency(state: FrequencyState, current: HotspotDistribution, config: FdaConfig):
    """Feed the distribution of the window just completed.

    Returns ``(new_state, frequency for the next window)``. The first window
    has nothing to compare against and is treated as divergence 0.
    """
    if state.last_distribution is None:
        d = 0.0
    else:
        d = js_divergence(state.last_distribution, current)
    new = advance(state, d, config)
    new = replace(
        new,
        last_distribution=current,
        last_divergence=None if state.last_distribution is None else d,
    )
    return new, new.frequency_hz


@dataclass
class StableShareEstimator:
    """Pools samples since the last detected hotspot shift.

    Low-frequency windows in a stable stretch reuse the high-frequency
    samples taken right after the shift, so share estimates keep the
    precision of the reference window. Any window with divergence above
    theta restarts the pool.
    """

    counts: dict = field(default_factory=dict)
    total: int = 0

    def update(self, window_counts: Mapping[str, int], shifted: bool) -> None:
        if shifted:
            self.counts = {}
            self.total = 0
        for name, n in window_counts.items():
            self.counts[name] = self.counts.get(name, 0) + n
            self.total += n

    def shares(self) -> dict:
        if not self.total:
            return {}
        return {name: n / self.total for name, n in self.counts.items()}
