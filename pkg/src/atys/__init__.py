"""Distributed hotspot-function profiling.

Node agents sample stack traces through pluggable kernels, prune idle
threads, adapt their sampling frequency and expose metrics; a controller
starts tasks across agents and merges their flamegraphs.
"""
from .flamegraph import Flamegraph, FlameNode, build, emit_folded, emit_json, hierarchical_aggregate, merge, merge_all
from .profile import (
    FoldedProfile,
    HotspotDistribution,
    ProfileMeta,
    TraceRecord,
    cpu_time_seconds,
    function_totals,
    hotspot_distribution,
    parse_folded,
    serialize_folded,
)

__version__ = "0.1.0"

__all__ = [
    "FlameNode", "Flamegraph", "build", "emit_folded", "emit_json", "hierarchical_aggregate", "merge", "merge_all",
    "FoldedProfile", "HotspotDistribution", "ProfileMeta", "TraceRecord", "cpu_time_seconds", "function_totals",
    "hotspot_distribution", "parse_folded", "serialize_folded",
]
