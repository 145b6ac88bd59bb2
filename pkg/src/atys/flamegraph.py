"""Flamegraph trees and their cross-instance aggregation.

Merging sums nodes that share a name under the same parent, from the root
down, so caller context is never collapsed. Two nodes match exactly when
their full root paths match, so a graph is stored as ``{path: self_value}``
and merging reduces to summing that map. The :class:`FlameNode` tree is
materialized on demand. Values are sample counts; conversion to seconds is
left to presentation.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .profile import FoldedProfile, MalformedLine

ROOT_NAME = "root"
SEP = ";"


class EmptyInput(ValueError):
    pass


class FlameNode:
    __slots__ = ("name", "self_value", "total_value", "children")

    def __init__(self, name: str, self_value: int = 0, total_value: int = 0, children=None):
        self.name = name
        self.self_value = self_value
        self.total_value = total_value
        self.children = children if children is not None else {}

    def child(self, name: str) -> "FlameNode":
        node = self.children.get(name)
        if node is None:
            node = self.children[name] = FlameNode(name)
        return node

    def __repr__(self):
        return f"FlameNode({self.name!r}, self={self.self_value}, total={self.total_value}, children={len(self.children)})"


@dataclass
class FlamegraphMeta:
    service: str = ""
    instances_merged: int = 1
    window_index: int = 0
    # per-input sampling frequencies; raw counts are merged without reweighting
    frequencies: tuple = ()

    def copy(self) -> "FlamegraphMeta":
        return FlamegraphMeta(self.service, self.instances_merged, self.window_index, self.frequencies)


class Flamegraph:
    """Rooted call-path tree with integer self/total values.

    Treated as immutable once returned from a public function. ``paths`` maps
    ``"f1;f2;...;fn"`` (root omitted) to the self value of that node; only
    positive values are stored.
    """

    __slots__ = ("paths", "meta", "_root", "_total")

    def __init__(self, paths: Mapping[str, int] | None = None, meta: FlamegraphMeta | None = None):
        self.paths = dict(paths) if paths else {}
        self.meta = meta or FlamegraphMeta()
        self._root = None
        self._total = None

    @property
    def total(self) -> int:
        if self._total is None:
            self._total = sum(self.paths.values())
        return self._total

    @property
    def root(self) -> FlameNode:
        if self._root is None:
            root = FlameNode(ROOT_NAME)
            for key, count in self.paths.items():
                node = root
                node.total_value += count
                for name in key.split(SEP):
                    node = node.child(name)
                    node.total_value += count
                node.self_value += count
            self._root = root
        return self._root

    def find(self, *path: str) -> FlameNode | None:
        node = self.root
        for name in path:
            node = node.children.get(name)
            if node is None:
                return None
        return node

    def copy(self) -> "Flamegraph":
        return Flamegraph(self.paths, self.meta.copy())

    @classmethod
    def from_root(cls, root: FlameNode, meta: FlamegraphMeta | None = None) -> "Flamegraph":
        paths: dict = {}
        stack = [((), root)]
        while stack:
            path, node = stack.pop()
            if path and node.self_value > 0:
                paths[SEP.join(path)] = node.self_value
            for name, c in node.children.items():
                stack.append((path + (name,), c))
        return cls(paths, meta)

    def __repr__(self):
        return f"Flamegraph(paths={len(self.paths)}, total={self.total}, meta={self.meta})"


def build(profile: FoldedProfile, thread_aware: bool = False) -> Flamegraph:
    """Insert every record of ``profile`` under a synthetic root.

    Thread frames are only kept with ``thread_aware``; graphs meant for global
    aggregation should leave it off.
    """
    paths: dict = defaultdict(int)
    for r in profile.records:
        key = SEP.join(r.path)
        paths[f"{r.thread}{SEP}{key}" if thread_aware else key] += r.count
    m = profile.meta
    return Flamegraph(paths, FlamegraphMeta(m.service, 1, m.window_index, (m.frequency_hz,)))


def parse_flamegraph(text: str, service: str = "", window_index: int = 0) -> Flamegraph:
    """Build a graph straight from folded text (no thread frame).

    Same grammar and errors as :func:`atys.profile.parse_folded`, without the
    intermediate profile; this is the aggregation hot path.
    """
    fg = Flamegraph(meta=FlamegraphMeta(service, 1, window_index))
    _add_folded(fg.paths, text)
    return fg


def _add_folded(paths: dict, text: str) -> None:
    get = paths.get
    for line_no, line in enumerate(text.split("\n"), start=1):
        if line.endswith("\r"):
            line = line[:-1]
        stack, sep, count_text = line.rpartition(" ")
        try:
            count = int(count_text)
        except ValueError:
            if not line.strip():
                continue
            raise MalformedLine(line_no, "non-integer count", line) from None
        if not sep or not stack:
            raise MalformedLine(line_no, "missing count", line)
        if count <= 0:
            raise MalformedLine(line_no, "count must be positive", line)
        if stack[0] == SEP or stack[-1] == SEP or ";;" in stack:
            raise MalformedLine(line_no, "empty frame", line)
        paths[stack] = get(stack, 0) + count


def _merge_into(dst: dict, src: Mapping[str, int]) -> None:
    get = dst.get
    for key, v in src.items():
        dst[key] = get(key, 0) + v


def _merge_meta(acc: FlamegraphMeta, other: FlamegraphMeta) -> None:
    acc.service = acc.service or other.service
    acc.instances_merged += other.instances_merged
    acc.window_index = max(acc.window_index, other.window_index)
    acc.frequencies = tuple(sorted(acc.frequencies + other.frequencies))


def merge(a: Flamegraph, b: Flamegraph) -> Flamegraph:
    out = a.copy()
    _merge_into(out.paths, b.paths)
    _merge_meta(out.meta, b.meta)
    return out


def merge_all(graphs: Iterable[Flamegraph]) -> Flamegraph:
    """Left fold of :func:`merge`. Inputs are consumed lazily and left untouched."""
    it = iter(graphs)
    try:
        acc = next(it).copy()
    except StopIteration:
        raise EmptyInput("merge_all needs at least one flamegraph") from None
    for g in it:
        _merge_into(acc.paths, g.paths)
        _merge_meta(acc.meta, g.meta)
    return acc


def group_rounds(n: int, group_size: int) -> list:
    """Number of group aggregations performed in each round for n inputs."""
    rounds = []
    while n > 1:
        n = -(-n // group_size)
        rounds.append(n)
    return rounds


def hierarchical_aggregate(graphs: Iterable[Flamegraph], group_size: int) -> Flamegraph:
    """Merge consecutive groups of ``group_size``, then groups of the results, until one remains.

    Runs as a streaming reduction: level ``i`` buffers at most ``group_size``
    partial results, so memory stays bounded for long input streams. The
    grouping is identical to the round-by-round batch construction.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    levels: list = [[]]
    seen = 0
    for g in graphs:
        seen += 1
        levels[0].append(g)
        lvl = 0
        while len(levels[lvl]) == group_size:
            merged = merge_all(levels[lvl])
            levels[lvl] = []
            if lvl + 1 == len(levels):
                levels.append([])
            levels[lvl + 1].append(merged)
            lvl += 1
    if seen == 0:
        raise EmptyInput("hierarchical_aggregate needs at least one flamegraph")
    if seen == 1:
        return levels[0][0].copy()
    # flush partial groups bottom-up
    lvl = 0
    while True:
        pending = levels[lvl]
        above = any(levels[j] for j in range(lvl + 1, len(levels)))
        if len(pending) == 1 and not above:
            return pending[0]
        if pending:
            merged = merge_all(pending)
            levels[lvl] = []
            if lvl + 1 == len(levels):
                levels.append([])
            levels[lvl + 1].append(merged)
        lvl += 1


def _sort_key(key: str) -> list:
    return key.split(SEP)


def iter_paths(fg: Flamegraph) -> Iterator[tuple]:
    """Yield ``(path_tuple, self_value)`` in canonical (root-first, name-ascending) order."""
    for key in sorted(fg.paths, key=_sort_key):
        yield tuple(key.split(SEP)), fg.paths[key]


def path_values(fg: Flamegraph) -> dict:
    return dict(iter_paths(fg))


def emit_folded(fg: Flamegraph) -> str:
    return "".join(f"{key} {fg.paths[key]}\n" for key in sorted(fg.paths, key=_sort_key))


def to_dict(node: FlameNode) -> dict:
    return {
        "name": node.name,
        "value": node.total_value,
        "children": [to_dict(node.children[n]) for n in sorted(node.children)],
    }


def emit_json(fg: Flamegraph) -> str:
    return json.dumps(to_dict(fg.root), separators=(",", ":"))


def check_invariants(fg: Flamegraph) -> None:
    """Raise AssertionError if any node's total differs from self + children."""
    if fg.root.total_value != fg.total:
        raise AssertionError("root total differs from path sum")
    stack = [fg.root]
    while stack:
        node = stack.pop()
        expect = node.self_value + sum(c.total_value for c in node.children.values())
        if node.total_value != expect:
            raise AssertionError(f"node {node.name!r}: total {node.total_value} != {expect}")
        stack.extend(node.children.values())
