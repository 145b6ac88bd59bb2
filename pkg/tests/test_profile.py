import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atys.profile import (
    DEFAULT_THREAD,
    FoldedProfile,
    FunctionStats,
    MalformedLine,
    NonPositiveFrequency,
    TraceRecord,
    cpu_time_seconds,
    function_totals,
    hotspot_distribution,
    parse_folded,
    serialize_folded,
    top_functions,
)

from helpers import random_profile
from oracles import group_records


def test_parse_single_line_default_thread():
    p = parse_folded("main;work;hash 7")
    assert p.records == (TraceRecord(DEFAULT_THREAD, ("main", "work", "hash"), 7),)
    assert p.total_samples == 7


def test_parse_empty():
    p = parse_folded("")
    assert len(p) == 0 and p.total_samples == 0


def test_parse_sums_duplicates():
    p = parse_folded("T1;a;b 3\nT1;a;b 5\n", thread_aware=True)
    assert p.records == (TraceRecord("T1", ("a", "b"), 8),)


def test_frames_with_spaces_split_at_last_space():
    p = parse_folded("main;relu (torch/nn/functional.py);run loop 12\n")
    assert p.records[0].path == ("main", "relu (torch/nn/functional.py)", "run loop")
    assert p.records[0].count == 12


@pytest.mark.parametrize("line,reason", [
    ("a;b", "missing count"),
    ("a;b x", "non-integer"),
    ("a;b 0", "positive"),
    ("a;b -2", "positive"),
    ("a;;b 3", "empty frame"),
    (" 3", "missing count"),
])
def test_malformed_lines(line, reason):
    with pytest.raises(MalformedLine) as ei:
        parse_folded(f"ok;line 1\n{line}\n")
    assert ei.value.line_no == 2
    assert reason in str(ei.value)


def test_thread_aware_needs_a_frame_after_thread():
    with pytest.raises(MalformedLine):
        parse_folded("T1 4", thread_aware=True)


def test_serialize_examples():
    assert serialize_folded(FoldedProfile()) == ""
    p = FoldedProfile.from_counts({("T1", ("a", "b")): 8})
    assert serialize_folded(p) == "T1;a;b 8\n"


def test_serialize_without_threads_sums_shared_paths():
    p = FoldedProfile.from_counts({("T1", ("a", "b")): 2, ("T2", ("a", "b")): 3, ("T2", ("a",)): 1})
    assert serialize_folded(p, thread_aware=False) == "a 1\na;b 5\n"


def test_round_trip_random_1000_records():
    rng = np.random.default_rng(3)
    p = random_profile(rng, 1000, n_threads=20, depth=(1, 12))
    assert parse_folded(serialize_folded(p), thread_aware=True) == p


frame = st.text(alphabet=st.characters(blacklist_characters=";\n\r", blacklist_categories=("Cs",)), min_size=1, max_size=8)
frame = frame.filter(lambda s: s.strip() == s and s != "")


@given(st.dictionaries(
    st.tuples(frame, st.lists(frame, min_size=1, max_size=5).map(tuple)),
    st.integers(1, 10_000), max_size=30))
@settings(max_examples=200, deadline=None)
def test_round_trip_property(counts):
    p = FoldedProfile.from_counts(counts)
    assert parse_folded(serialize_folded(p), thread_aware=True) == p


@given(st.lists(st.tuples(st.sampled_from(["T1", "T2"]),
                          st.lists(st.sampled_from("abc"), min_size=1, max_size=3),
                          st.integers(1, 9)), max_size=40))
@settings(max_examples=100, deadline=None)
def test_parse_grouping_matches_multiset_oracle(lines):
    text = "".join(f"{t};{';'.join(path)} {n}\n" for t, path, n in lines)
    p = parse_folded(text, thread_aware=True)
    assert {(r.thread, r.path): r.count for r in p.records} == group_records(lines)
    assert list(p.records) == sorted(p.records)


def test_function_totals_examples():
    p = FoldedProfile.from_counts({("all", ("a", "b")): 4, ("all", ("a", "c")): 6})
    assert function_totals(p) == {
        "a": FunctionStats(0, 10), "b": FunctionStats(4, 4), "c": FunctionStats(6, 6)}
    assert function_totals(FoldedProfile.from_counts({("all", ("a",)): 5})) == {"a": FunctionStats(5, 5)}
    # recursion counted once
    assert function_totals(FoldedProfile.from_counts({("all", ("a", "a")): 3})) == {"a": FunctionStats(3, 3)}


def test_function_totals_invariants():
    rng = np.random.default_rng(5)
    p = random_profile(rng, 300)
    totals = function_totals(p)
    assert sum(s.self_samples for s in totals.values()) == p.total_samples
    for s in totals.values():
        assert 0 <= s.self_samples <= s.inclusive_samples <= p.total_samples


def test_cpu_time():
    assert cpu_time_seconds(0, 1000) == 0.0
    assert cpu_time_seconds(1000, 1000) == 1.0
    assert cpu_time_seconds(357, 100) == pytest.approx(3.57)
    with pytest.raises(NonPositiveFrequency):
        cpu_time_seconds(10, 0)


def _totals(selfs):
    return {k: FunctionStats(v, v) for k, v in selfs.items()}


def test_hotspot_distribution_examples():
    assert hotspot_distribution(_totals({"a": 90, "b": 10}), 10).shares == {"a": 0.9, "b": 0.1}
    assert hotspot_distribution(_totals({"a": 5, "b": 5, "c": 5}), 2).shares == {"a": 0.5, "b": 0.5}
    assert hotspot_distribution({}, 10).shares == {}


def test_top_functions_ignores_zero_and_ties_by_name():
    assert top_functions({"z": 3, "a": 3, "m": 0, "b": 7}, 3) == ["b", "a", "z"]


def test_trace_record_validation():
    with pytest.raises(ValueError):
        TraceRecord("T", (), 1)
    with pytest.raises(ValueError):
        TraceRecord("T", ("a;b",), 1)
