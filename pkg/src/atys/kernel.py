"""Profiling kernels: language detection, kernel selection and sample sources.

Real profilers (async-profiler, py-spy, perf) are reached through
:class:`ExecKernel`, which runs a command template once per window and reads
folded lines from its stdout. :class:`ReplayKernel` and
:class:`SyntheticKernel` produce windows without touching any process.

All kernels share one handle contract: ``start(frequency)`` once,
``poll_window()`` once per window, ``set_frequency(hz)`` between polls (it
takes effect for the next window), ``stop()`` at the end.
"""
from __future__ import annotations

import enum
import logging
import queue
import re
import shlex
import subprocess
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .profile import FoldedProfile, MalformedLine, ProfileMeta, TraceRecord, parse_folded

log = logging.getLogger(__name__)


class KernelError(RuntimeError):
    pass


class KernelExited(KernelError):
    pass


class MalformedKernelOutput(KernelError):
    pass


class Language(enum.Enum):
    JAVA = "java"
    PYTHON = "python"
    COMPILED = "compiled"


class KernelKind(enum.Enum):
    JVM = "jvm"
    PYTHON = "python"
    SYSTEM = "system"
    REPLAY = "replay"
    SYNTHETIC = "synthetic"
    EXEC = "exec"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown kernel kind {value!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class ProcessDescriptor:
    pid: str
    executable_name: str
    interpreter_hint: str | None = None

    def __post_init__(self):
        if not self.executable_name:
            raise ValueError("executable_name must be non-empty")


# token must stand alone; trailing version digits are fine (python3.10, java8)
_JAVA_TOKENS = re.compile(r"(^|[/_.\-\s])(java|libjvm)(?=$|[\d/_.\-\s])", re.I)
_PYTHON_TOKENS = re.compile(r"(^|[/_.\-\s])(python|libpython|pypy)(?=$|[\d/_.\-\s])", re.I)


def detect_language(proc: ProcessDescriptor) -> Language:
    """Guess the runtime from the executable name and interpreter hint.

    Only names are inspected; anything without a JVM or Python interpreter
    signature is treated as compiled.
    """
    haystack = " ".join(filter(None, (Path(proc.executable_name).name, proc.interpreter_hint or "")))
    if _JAVA_TOKENS.search(haystack):
        return Language.JAVA
    if _PYTHON_TOKENS.search(haystack):
        return Language.PYTHON
    return Language.COMPILED


_DEFAULT_KIND = {
    Language.JAVA: KernelKind.JVM,
    Language.PYTHON: KernelKind.PYTHON,
    Language.COMPILED: KernelKind.SYSTEM,
}


def select_kernel(language: Language, override: KernelKind | str | None = None) -> KernelKind:
    if override is not None:
        return KernelKind.parse(override)
    return _DEFAULT_KIND[language]


# Command templates for the real profilers. Tokens: {pid}, {frequency},
# {duration}, {interval_ns}. Each must print folded stacks on stdout.
DEFAULT_TEMPLATES = {
    KernelKind.JVM: "asprof -d {duration} -e cpu -i {interval_ns} -t -o collapsed {pid}",
    KernelKind.PYTHON: "py-spy record --pid {pid} --rate {frequency} --duration {duration} --threads --format raw --output /dev/stdout",
    KernelKind.SYSTEM: "sh -c 'perf record -F {frequency} -g -p {pid} -o - -- sleep {duration} 2>/dev/null | perf script -i - | stackcollapse-perf.pl --tid'",
}


class Kernel:
    """Base handle. Subclasses implement :meth:`_collect`."""

    kind: KernelKind

    def __init__(self, window_seconds: float = 10.0, thread_aware: bool = True):
        if window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        self.window_seconds = window_seconds
        self.thread_aware = thread_aware
        self.frequency_hz: float | None = None
        self._pending_hz: float | None = None
        self.window_index = 0
        self.running = False

    def start(self, frequency_hz: float) -> "Kernel":
        if frequency_hz <= 0:
            raise ValueError("frequency must be positive")
        self.frequency_hz = float(frequency_hz)
        self.running = True
        self._on_start()
        return self

    def set_frequency(self, hz: float) -> None:
        if hz <= 0:
            raise ValueError("frequency must be positive")
        self._pending_hz = float(hz)

    def poll_window(self) -> FoldedProfile:
        if not self.running:
            raise KernelError("kernel is not running")
        if self._pending_hz is not None:
            self.frequency_hz, self._pending_hz = self._pending_hz, None
            self._on_frequency_change()
        profile = self._collect()
        self.window_index += 1
        return profile

    def stop(self) -> None:
        self.running = False
        self._on_stop()

    def _meta(self, frequency_hz: float | None = None) -> ProfileMeta:
        return ProfileMeta(
            frequency_hz=frequency_hz or self.frequency_hz,
            window_seconds=self.window_seconds,
            window_index=self.window_index,
        )

    def _on_start(self):
        pass

    def _on_frequency_change(self):
        pass

    def _on_stop(self):
        pass

    def _collect(self) -> FoldedProfile:
        raise NotImplementedError


class ReplayKernel(Kernel):
    """Plays back a folded corpus at the commanded rate.

    Every window advances a sample cursor by ``round(frequency * window_seconds)``
    and emits, for each record, the growth of ``floor(cursor * count / total)``.
    Windows are therefore proportional slices of the corpus, and once the
    cursor reaches the end the emitted windows sum to the corpus exactly.
    With ``loop`` the cursor wraps around instead of stopping.
    """

    kind = KernelKind.REPLAY

    def __init__(self, source: str | FoldedProfile, window_seconds: float = 10.0,
                 thread_aware: bool = False, loop: bool = False):
        super().__init__(window_seconds, thread_aware)
        if isinstance(source, FoldedProfile):
            corpus = source
        else:
            corpus = parse_folded(Path(source).read_text(), thread_aware=thread_aware)
        self.corpus = corpus
        self.total = corpus.total_samples
        self.loop = loop
        self.cursor = 0

    @property
    def exhausted(self) -> bool:
        return not self.loop and self.cursor >= self.total

    def _emitted(self, cursor: int) -> list:
        return [cursor * r.count // self.total for r in self.corpus.records]

    def _collect(self) -> FoldedProfile:
        meta = self._meta()
        if self.total == 0:
            return FoldedProfile((), meta)
        budget = round(self.frequency_hz * self.window_seconds)
        counts: dict = defaultdict(int)
        while budget > 0 and not self.exhausted:
            end = min(self.cursor + budget, self.total)
            before, after = self._emitted(self.cursor), self._emitted(end)
            for r, x0, x1 in zip(self.corpus.records, before, after):
                if x1 > x0:
                    counts[(r.thread, r.path)] += x1 - x0
            budget -= end - self.cursor
            self.cursor = end
            if self.loop and self.cursor >= self.total:
                self.cursor = 0
        return FoldedProfile.from_counts(counts, meta)


@dataclass
class CallNode:
    self_weight: float = 0.0
    children: dict = field(default_factory=dict)  # child name -> weight


@dataclass
class Phase:
    duration_windows: int
    # function name -> weight of every call edge leading into it
    weight_overrides: dict = field(default_factory=dict)


@dataclass
class SyntheticWorkloadConfig:
    """Weighted call tree sampled per window, with threads drawn from a Zipf law.

    ``call_tree`` maps a function name to its :class:`CallNode`; descending
    from ``root`` each level either stops (self weight) or picks a child
    (edge weight). ``phases`` cycle forever; each overrides the weight of the
    edges leading into chosen functions, shifting hotspots over time.
    """

    call_tree: dict
    root: str
    seed: int = 0
    thread_count: int = 1
    zipf_exponent: float = 1.2
    phases: list = field(default_factory=list)
    thread_prefix: str = "thread-"

    def __post_init__(self):
        if self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be positive")
        if self.root not in self.call_tree:
            raise ValueError(f"root {self.root!r} missing from call tree")
        self.call_tree = {
            name: node if isinstance(node, CallNode) else CallNode(node.get("self", 0.0), dict(node.get("children", {})))
            for name, node in self.call_tree.items()
        }
        self.phases = [p if isinstance(p, Phase) else Phase(p["duration_windows"], dict(p.get("weight_overrides", {})))
                       for p in self.phases]
        for name, node in list(self.call_tree.items()):
            weights = [node.self_weight, *node.children.values()]
            if any(w < 0 for w in weights):
                raise ValueError(f"negative weight under {name!r}")
            for child in node.children:
                if child not in self.call_tree:
                    self.call_tree[child] = CallNode(1.0)
        for ph in self.phases:
            if ph.duration_windows < 1:
                raise ValueError("phase duration must be >= 1 window")
        for i in range(max(1, len(self.phases))):
            self.path_distribution(i)  # validates every phase

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticWorkloadConfig":
        return cls(
            call_tree=dict(d["call_tree"]),
            root=d["root"],
            seed=int(d.get("seed", 0)),
            thread_count=int(d.get("thread_count", 1)),
            zipf_exponent=float(d.get("zipf_exponent", 1.2)),
            phases=list(d.get("phases", [])),
        )

    def phase_at(self, window_index: int) -> int:
        if not self.phases:
            return 0
        period = sum(p.duration_windows for p in self.phases)
        t = window_index % period
        for i, p in enumerate(self.phases):
            if t < p.duration_windows:
                return i
            t -= p.duration_windows
        raise AssertionError("unreachable")

    def path_distribution(self, phase: int = 0) -> tuple:
        """All root-to-stop paths with their probabilities under ``phase``."""
        overrides = self.phases[phase].weight_overrides if self.phases else {}
        paths, probs = [], []
        stack = [((self.root,), 1.0)]
        while stack:
            path, prob = stack.pop()
            node = self.call_tree[path[-1]]
            sw = node.self_weight
            edges = {c: overrides.get(c, w) for c, w in node.children.items()}
            if any(w < 0 for w in edges.values()):
                raise ValueError(f"negative weight override under {path[-1]!r}")
            denom = sw + sum(edges.values())
            if denom <= 0:
                raise ValueError(f"all weights are zero under {path[-1]!r}")
            if sw > 0:
                paths.append(path)
                probs.append(prob * sw / denom)
            for child, w in edges.items():
                if w > 0:
                    if child in path:
                        raise ValueError(f"call tree has a cycle through {child!r}")
                    stack.append((path + (child,), prob * w / denom))
        order = sorted(range(len(paths)), key=lambda i: paths[i])
        p = np.array([probs[i] for i in order])
        return [paths[i] for i in order], p / p.sum()

    def leaf_shares(self, phase: int = 0) -> dict:
        """Ground-truth self-time share of every function in ``phase``."""
        paths, probs = self.path_distribution(phase)
        out: dict = defaultdict(float)
        for path, pr in zip(paths, probs):
            out[path[-1]] += float(pr)
        return dict(out)

    def thread_names(self) -> list:
        width = len(str(self.thread_count))
        return [f"{self.thread_prefix}{i:0{width}d}" for i in range(1, self.thread_count + 1)]

    def thread_probabilities(self) -> np.ndarray:
        ranks = np.arange(1, self.thread_count + 1, dtype=float)
        w = ranks ** -self.zipf_exponent
        return w / w.sum()


class SyntheticKernel(Kernel):
    """Draws exactly ``round(frequency * window_seconds)`` samples per window.

    Each sample is a call-tree descent (precomputed as a categorical over
    paths) assigned to a Zipf-ranked thread. Window ``i`` uses its own
    generator seeded from ``(seed, i)``, so output depends only on the seed,
    the config and the frequency schedule.
    """

    kind = KernelKind.SYNTHETIC

    def __init__(self, config: SyntheticWorkloadConfig, window_seconds: float = 10.0):
        super().__init__(window_seconds, thread_aware=True)
        self.config = config
        self._dists = {}
        self._threads = config.thread_names()
        self._thread_p = config.thread_probabilities()

    def _dist(self, phase: int):
        if phase not in self._dists:
            self._dists[phase] = self.config.path_distribution(phase)
        return self._dists[phase]

    def sample(self, n: int, window_index: int) -> FoldedProfile:
        paths, probs = self._dist(self.config.phase_at(window_index))
        rng = np.random.default_rng([self.config.seed, window_index])
        meta = ProfileMeta(frequency_hz=self.frequency_hz or 1.0, window_seconds=self.window_seconds,
                           window_index=window_index)
        if n <= 0:
            return FoldedProfile((), meta)
        path_idx = rng.choice(len(paths), size=n, p=probs)
        n_threads = len(self._threads)
        if n_threads == 1:
            keys = path_idx
        else:
            thread_idx = rng.choice(n_threads, size=n, p=self._thread_p)
            keys = path_idx.astype(np.int64) * n_threads + thread_idx
        uniq, counts = np.unique(keys, return_counts=True)
        records = []
        for key, c in zip(uniq.tolist(), counts.tolist()):
            pi, ti = divmod(key, n_threads)
            records.append(TraceRecord(self._threads[ti], paths[pi], c))
        records.sort()
        return FoldedProfile(tuple(records), meta)

    def _collect(self) -> FoldedProfile:
        n = round(self.frequency_hz * self.window_seconds)
        return self.sample(n, self.window_index)


class ExecKernel(Kernel):
    """Runs an external command once per window and parses its folded stdout.

    A reader thread loops over command runs and hands complete windows to
    the owner through a queue. A nonzero exit or unparsable output poisons
    the kernel: the next poll raises and the partial output is dropped.
    """

    kind = KernelKind.EXEC

    def __init__(self, command: str, pid: str = "", window_seconds: float = 10.0,
                 thread_aware: bool = True, timeout_factor: float = 3.0):
        super().__init__(window_seconds, thread_aware)
        self.template = command
        self.pid = pid
        self.timeout = window_seconds * timeout_factor + 5
        self._windows: queue.Queue = queue.Queue()
        self._error: KernelError | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def command_line(self, frequency_hz: float | None = None) -> list:
        f = frequency_hz or self.frequency_hz
        text = self.template.format(
            pid=self.pid,
            frequency=f"{f:g}",
            duration=f"{self.window_seconds:g}",
            interval_ns=str(int(round(1e9 / f))),
        )
        return shlex.split(text)

    def _on_start(self):
        self._thread = threading.Thread(target=self._reader, name=f"exec-kernel-{self.pid}", daemon=True)
        self._thread.start()

    def _reader(self):
        while not self._stop.is_set():
            freq = self._pending_hz or self.frequency_hz
            argv = self.command_line(freq)
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                self._error = KernelExited(f"{argv[0]}: {exc}")
                return
            if self._stop.is_set():
                return
            if proc.returncode != 0:
                self._error = KernelExited(f"{argv[0]} exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
                return
            try:
                profile = parse_folded(proc.stdout, thread_aware=self.thread_aware)
            except MalformedLine as exc:
                self._error = MalformedKernelOutput(str(exc))
                return
            self._windows.put((freq, profile))

    def _collect(self) -> FoldedProfile:
        runs = []
        while True:
            try:
                runs.append(self._windows.get_nowait())
            except queue.Empty:
                break
        if not runs and self._error is not None:
            raise self._error
        if not runs:
            return FoldedProfile((), self._meta())
        freq = sum(f for f, _ in runs) / len(runs)
        records = [r for _, prof in runs for r in prof.records]
        return FoldedProfile.from_records(records, self._meta(freq))

    def _on_stop(self):
        self._stop.set()


def kernel_start(kind: KernelKind | str, config: Mapping, frequency_hz: float,
                 window_seconds: float = 10.0) -> Kernel:
    """Instantiate and start the kernel described by ``kind`` and ``config``.

    JVM/Python/system kinds resolve to :class:`ExecKernel` with either the
    configured ``command`` or the stock template for that profiler.
    """
    kind = KernelKind.parse(kind)
    config = dict(config or {})
    if kind is KernelKind.REPLAY:
        if "path" in config:
            source = config["path"]
        elif "folded" in config:
            source = parse_folded(config["folded"], thread_aware=bool(config.get("thread_aware", False)))
        else:
            raise ValueError("replay kernel needs 'path' or 'folded'")
        k = ReplayKernel(source, window_seconds, bool(config.get("thread_aware", False)), bool(config.get("loop", False)))
    elif kind is KernelKind.SYNTHETIC:
        k = SyntheticKernel(SyntheticWorkloadConfig.from_dict(config["workload"]), window_seconds)
    else:
        command = config.get("command") or DEFAULT_TEMPLATES.get(kind)
        if not command:
            raise ValueError("exec kernel needs a 'command' template")
        k = ExecKernel(command, str(config.get("pid", "")), window_seconds, bool(config.get("thread_aware", True)))
        k.kind = kind
    return k.start(frequency_hz)


def kernel_set_frequency(handle: Kernel, hz: float) -> None:
    handle.set_frequency(hz)


def kernel_poll_window(handle: Kernel) -> FoldedProfile:
    return handle.poll_window()


def kernel_stop(handle: Kernel) -> None:
    handle.stop()
