"""Per-node agent: window loop, metrics exposition and the command protocol.

Each task owns a kernel and runs a sequential window loop::

    poll kernel -> prune threads -> per-function totals -> adjust frequency
                -> fold into the local flamegraph -> publish a new snapshot

Snapshots are immutable and swapped in one assignment, so ``/metrics``
readers always see a whole window or none of it.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import socketserver
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping

from . import flamegraph as fgm
from .fda import FdaConfig, FrequencyState, next_frequency
from .fsp import prune
from .kernel import (
    Kernel,
    KernelError,
    KernelKind,
    ProcessDescriptor,
    detect_language,
    kernel_start,
    select_kernel,
)
from .profile import function_totals, hotspot_distribution, top_functions

log = logging.getLogger(__name__)

DEFAULT_WINDOW_SECONDS = 10.0
DEFAULT_PERCENTILE = 99.0
DEFAULT_TOP_K = 10
DEFAULT_FREQUENCY_HZ = 1000.0


class CommandError(Exception):
    code = "Error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class UnknownTask(CommandError):
    code = "UnknownTask"


class DuplicateTaskId(CommandError):
    code = "DuplicateTaskId"


class BadConfig(CommandError):
    code = "BadConfig"


class BadRequest(CommandError):
    code = "BadRequest"


class Unauthorized(CommandError):
    code = "Unauthorized"


class InvalidState(CommandError):
    code = "InvalidState"


class TaskState(enum.Enum):
    STARTING = "Starting"
    RUNNING = "Running"
    STOPPING = "Stopping"
    STOPPED = "Stopped"
    FAILED = "Failed"


_NEXT = {
    TaskState.STARTING: {TaskState.RUNNING},
    TaskState.RUNNING: {TaskState.STOPPING},
    TaskState.STOPPING: {TaskState.STOPPED},
    TaskState.STOPPED: set(),
    TaskState.FAILED: set(),
}


@dataclass(frozen=True)
class TaskSpec:
    service: str
    instance: str
    kernel_kind: KernelKind
    kernel_config: dict
    window_seconds: float = DEFAULT_WINDOW_SECONDS
    initial_frequency_hz: float = DEFAULT_FREQUENCY_HZ
    fda: FdaConfig = field(default_factory=FdaConfig)
    fda_enabled: bool = True
    fsp_percentile: float = DEFAULT_PERCENTILE
    top_k: int = DEFAULT_TOP_K
    manual: bool = False
    language: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        if not isinstance(d, Mapping):
            raise BadConfig("config must be an object")
        try:
            kernel = dict(d.get("kernel") or {})
            language = None
            override = kernel.pop("kind", None)
            if override is None:
                proc = d.get("process")
                if not proc:
                    raise BadConfig("config needs 'kernel.kind' or a 'process' descriptor")
                pd = ProcessDescriptor(str(proc.get("pid", "")), proc["executable_name"], proc.get("interpreter_hint"))
                lang = detect_language(pd)
                language = lang.value
                kind = select_kernel(lang)
                kernel.setdefault("pid", pd.pid)
            else:
                kind = KernelKind.parse(override)
            fda_cfg = dict(d.get("fda") or {})
            fda_enabled = bool(fda_cfg.pop("enabled", True))
            fda = FdaConfig(**fda_cfg)
            spec = cls(
                service=str(d.get("service", "")),
                instance=str(d.get("instance", "")),
                kernel_kind=kind,
                kernel_config=kernel,
                window_seconds=float(d.get("window_seconds", DEFAULT_WINDOW_SECONDS)),
                initial_frequency_hz=float(d.get("initial_frequency_hz", fda.clamp(DEFAULT_FREQUENCY_HZ))),
                fda=fda,
                fda_enabled=fda_enabled,
                fsp_percentile=float(d.get("fsp_percentile", DEFAULT_PERCENTILE)),
                top_k=int(d.get("top_k", DEFAULT_TOP_K)),
                manual=bool(d.get("manual", False)),
                language=language,
            )
        except BadConfig:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise BadConfig(f"invalid task config: {exc}") from None
        if spec.window_seconds <= 0:
            raise BadConfig("window_seconds must be positive")
        if not 0 < spec.fsp_percentile <= 100:
            raise BadConfig("fsp_percentile must lie in (0, 100]")
        if spec.top_k < 1:
            raise BadConfig("top_k must be >= 1")
        if not fda.f_min_hz <= spec.initial_frequency_hz <= fda.f_max_hz:
            raise BadConfig("initial_frequency_hz must lie within [f_min_hz, f_max_hz]")
        return spec


@dataclass(frozen=True)
class FunctionMetric:
    name: str
    self_samples: int
    cpu_seconds: float
    share: float


@dataclass(frozen=True)
class MetricsSnapshot:
    service: str
    instance: str
    task_id: str
    functions: tuple = ()
    frequency_hz: float = 0.0
    js_divergence: float | None = None
    pruned_threads: int = 0
    retained_threads: int = 0
    windows_completed: int = 0
    total_samples: int = 0


class ProfilingTask:
    def __init__(self, task_id: str, spec: TaskSpec):
        self.task_id = task_id
        self.spec = spec
        self.state = TaskState.STARTING
        self.reason = ""
        self.kernel: Kernel | None = None
        self.fda_state = FrequencyState(spec.initial_frequency_hz)
        self.cum_self: dict = {}
        self.cum_cpu: dict = {}
        self.total_samples = 0
        self.windows_completed = 0
        self._local: dict = {}
        self.frequencies: list = []
        self.flamegraph = fgm.Flamegraph(meta=fgm.FlamegraphMeta(spec.service, 1, 0))
        self.snapshot = MetricsSnapshot(spec.service, spec.instance, task_id, frequency_hz=spec.initial_frequency_hz)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._window_lock = threading.Lock()

    def transition(self, new: TaskState, reason: str = "") -> None:
        if new is TaskState.FAILED:
            if self.state in (TaskState.STOPPED, TaskState.FAILED):
                raise InvalidState(f"task {self.task_id} is already {self.state.value}")
        elif new not in _NEXT[self.state]:
            raise InvalidState(f"task {self.task_id}: cannot go from {self.state.value} to {new.value}")
        self.state = new
        self.reason = reason

    def status(self) -> dict:
        snap = self.snapshot
        return {
            "task_id": self.task_id,
            "state": self.state.value,
            "reason": self.reason,
            "service": self.spec.service,
            "instance": self.spec.instance,
            "kernel": self.spec.kernel_kind.value,
            "windows_completed": snap.windows_completed,
            "frequency_hz": snap.frequency_hz,
            "total_samples": snap.total_samples,
        }


def run_window(task: ProfilingTask) -> MetricsSnapshot:
    """Process one window for ``task`` and publish the resulting snapshot."""
    with task._window_lock:
        return _run_window(task)


def _run_window(task: ProfilingTask) -> MetricsSnapshot:
    spec = task.spec
    profile = task.kernel.poll_window()
    task.windows_completed += 1
    prev = task.snapshot
    if profile.total_samples == 0:
        # idle window: no distribution to compare, keep the frequency
        task.snapshot = MetricsSnapshot(
            prev.service, prev.instance, prev.task_id, prev.functions, prev.frequency_hz,
            None, prev.pruned_threads, prev.retained_threads, task.windows_completed, task.total_samples,
        )
        return task.snapshot

    freq = profile.meta.frequency_hz
    pruned, report = prune(profile, spec.fsp_percentile)
    totals = function_totals(pruned)
    window_total = pruned.total_samples
    for name, st in totals.items():
        if st.self_samples:
            task.cum_self[name] = task.cum_self.get(name, 0) + st.self_samples
            task.cum_cpu[name] = task.cum_cpu.get(name, 0.0) + st.self_samples / freq
    task.total_samples += window_total

    divergence = None
    next_hz = task.fda_state.frequency_hz
    if spec.fda_enabled:
        dist = hotspot_distribution(totals, spec.fda.k, profile.meta.window_index)
        task.fda_state, next_hz = next_frequency(task.fda_state, dist, spec.fda)
        divergence = task.fda_state.last_divergence
        task.kernel.set_frequency(next_hz)

    fgm._merge_into(task._local, fgm.build(pruned).paths)
    task.frequencies.append(freq)
    task.flamegraph = fgm.Flamegraph(
        task._local,
        fgm.FlamegraphMeta(spec.service, 1, task.windows_completed, (freq,)),
    )

    top = top_functions(task.cum_self, spec.top_k)
    functions = tuple(
        FunctionMetric(
            name,
            task.cum_self[name],
            task.cum_cpu[name],
            (totals[name].self_samples / window_total) if name in totals else 0.0,
        )
        for name in top
    )
    task.snapshot = MetricsSnapshot(
        spec.service, spec.instance, task.task_id, functions, next_hz, divergence,
        report.discarded_threads, report.retained_threads, task.windows_completed, task.total_samples,
    )
    return task.snapshot


# -- exposition -----------------------------------------------------------

FAMILIES = (
    ("atys_function_samples_total", "counter", "Cumulative self samples of a top-k hotspot function."),
    ("atys_function_cpu_seconds_total", "counter", "Cumulative CPU seconds of a top-k hotspot function, from samples and window frequency."),
    ("atys_function_share", "gauge", "Self-sample share of the function in the latest window."),
    ("atys_sampling_frequency_hz", "gauge", "Sampling frequency commanded for the next window."),
    ("atys_js_divergence", "gauge", "Jensen-Shannon divergence between the last two hotspot distributions."),
    ("atys_pruned_threads", "gauge", "Threads discarded by pruning in the latest window."),
    ("atys_windows_completed_total", "counter", "Windows processed by the task."),
)


def escape_label(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _labels(pairs) -> str:
    return "{" + ",".join(f'{k}="{escape_label(str(v))}"' for k, v in pairs) + "}"


def _num(v) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def render_exposition(snapshots) -> str:
    """Text exposition document for a list of task snapshots."""
    rows: dict = {name: [] for name, _, _ in FAMILIES}
    for s in snapshots:
        base = (("service", s.service), ("instance", s.instance), ("task_id", s.task_id))
        for fn in s.functions:
            lab = _labels(base + (("function", fn.name),))
            rows["atys_function_samples_total"].append((lab, fn.self_samples))
            rows["atys_function_cpu_seconds_total"].append((lab, fn.cpu_seconds))
            rows["atys_function_share"].append((lab, fn.share))
        lab = _labels(base)
        rows["atys_sampling_frequency_hz"].append((lab, s.frequency_hz))
        if s.js_divergence is not None:
            rows["atys_js_divergence"].append((lab, s.js_divergence))
        rows["atys_pruned_threads"].append((lab, s.pruned_threads))
        rows["atys_windows_completed_total"].append((lab, s.windows_completed))
    out = []
    for name, kind, help_text in FAMILIES:
        out.append(f"# HELP {name} {help_text}")
        out.append(f"# TYPE {name} {kind}")
        out.extend(f"{name}{lab} {_num(v)}" for lab, v in rows[name])
    return "\n".join(out) + "\n"


# -- agent ----------------------------------------------------------------

class Agent:
    def __init__(self, token: str | None = None, data_dir: str | os.PathLike | None = None):
        self.token = token
        self.data_dir = Path(data_dir) if data_dir else None
        self.tasks: dict = {}
        self._lock = threading.Lock()
        self._servers: list = []

    # commands
    def handle_command(self, msg) -> dict:
        try:
            return {"ok": True, **self._dispatch(msg)}
        except CommandError as exc:
            return {"ok": False, "error": {"code": exc.code, "message": exc.message}}
        except Exception as exc:  # never drop the connection over a bad message
            log.exception("command failed")
            return {"ok": False, "error": {"code": "Internal", "message": str(exc)}}

    def _dispatch(self, msg) -> dict:
        if not isinstance(msg, Mapping):
            raise BadRequest("message must be a JSON object")
        if self.token is not None and msg.get("token") != self.token:
            raise Unauthorized("bad or missing token")
        kind = msg.get("type")
        if kind == "START":
            return self.start_task(self._task_id(msg), msg.get("config") or {})
        if kind == "STOP":
            return self.stop_task(self._task_id(msg))
        if kind == "STATUS":
            task_id = msg.get("task_id")
            if task_id is None:
                with self._lock:
                    tasks = list(self.tasks.values())
                return {"tasks": [t.status() for t in tasks]}
            return {"tasks": [self._get(task_id).status()]}
        if kind == "PULL_FLAMEGRAPH":
            return self.pull_flamegraph(self._task_id(msg))
        raise BadRequest(f"unknown message type {kind!r}")

    @staticmethod
    def _task_id(msg) -> str:
        task_id = msg.get("task_id")
        if not task_id or not isinstance(task_id, str):
            raise BadRequest("task_id is required")
        return task_id

    def _get(self, task_id: str) -> ProfilingTask:
        with self._lock:
            task = self.tasks.get(task_id)
        if task is None:
            raise UnknownTask(f"no task {task_id!r}")
        return task

    def start_task(self, task_id: str, config: Mapping) -> dict:
        spec = TaskSpec.from_dict(config)
        task = ProfilingTask(task_id, spec)
        with self._lock:
            if task_id in self.tasks:
                raise DuplicateTaskId(f"task {task_id!r} already exists")
            self.tasks[task_id] = task
        try:
            task.kernel = kernel_start(spec.kernel_kind, spec.kernel_config, spec.initial_frequency_hz, spec.window_seconds)
        except (OSError, ValueError, KeyError, TypeError, KernelError) as exc:
            task.transition(TaskState.FAILED, str(exc))
            raise BadConfig(f"cannot start kernel: {exc}") from None
        task.transition(TaskState.RUNNING)
        if not spec.manual:
            task._thread = threading.Thread(target=self._loop, args=(task,), name=f"task-{task_id}", daemon=True)
            task._thread.start()
        return {"task_id": task_id, "state": task.state.value, "kernel": spec.kernel_kind.value, "language": spec.language}

    def _loop(self, task: ProfilingTask) -> None:
        while not task._stop.wait(task.spec.window_seconds):
            try:
                run_window(task)
            except KernelError as exc:
                log.warning("task %s failed: %s", task.task_id, exc)
                task.kernel.stop()
                task.transition(TaskState.FAILED, str(exc))
                return

    def stop_task(self, task_id: str) -> dict:
        task = self._get(task_id)
        with self._lock:
            task.transition(TaskState.STOPPING)
        task._stop.set()
        if task._thread is not None:
            task._thread.join()
        if task.state is TaskState.STOPPING:
            try:
                run_window(task)  # flush the partial final window
            except KernelError as exc:
                task.transition(TaskState.FAILED, str(exc))
            task.kernel.stop()
            if task.state is TaskState.STOPPING:
                task.transition(TaskState.STOPPED)
        self._write_local(task)
        return {**self.pull_flamegraph(task_id), "state": task.state.value}

    def pull_flamegraph(self, task_id: str) -> dict:
        task = self._get(task_id)
        fg = task.flamegraph
        return {
            "task_id": task_id,
            "service": task.spec.service,
            "instance": task.spec.instance,
            "folded": fgm.emit_folded(fg),
            "total_samples": fg.total,
            "windows_completed": task.windows_completed,
            "frequency_hz": task.snapshot.frequency_hz,
            "pruned_threads": task.snapshot.pruned_threads,
            "retained_threads": task.snapshot.retained_threads,
        }

    def _write_local(self, task: ProfilingTask) -> None:
        if self.data_dir is None:
            return
        fg = task.flamegraph
        stem = f"{task.spec.service or task.task_id}_{fg.meta.window_index}_local"
        write_atomic(self.data_dir / f"{stem}.folded", fgm.emit_folded(fg))
        write_atomic(self.data_dir / f"{stem}.json", fgm.emit_json(fg))

    # exposition
    def render_metrics(self) -> str:
        with self._lock:
            snaps = [t.snapshot for t in self.tasks.values()]
        return render_exposition(snaps)

    # servers
    def serve(self, command_port: int = 0, metrics_port: int = 0, host: str = "127.0.0.1") -> tuple:
        """Start the command and metrics servers in background threads; returns the bound ports."""
        agent = self

        class CommandHandler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.strip()
                    if not line:
                        continue
                    try:
                        msg = json.loads(line)
                    except ValueError as exc:
                        resp = {"ok": False, "error": {"code": "BadRequest", "message": f"invalid JSON: {exc}"}}
                    else:
                        resp = agent.handle_command(msg)
                    self.wfile.write((json.dumps(resp) + "\n").encode())
                    self.wfile.flush()

        class MetricsHandler(BaseHTTPRequestHandler):
            def do_GET(self):
                if self.path.split("?")[0] != "/metrics":
                    self.send_error(404)
                    return
                body = agent.render_metrics().encode()
                self.send_response(200)
                self.send_header("Content-Type", "text/plain; version=0.0.4; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        class TCPServer(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        cmd = TCPServer((host, command_port), CommandHandler)
        met = ThreadingHTTPServer((host, metrics_port), MetricsHandler)
        met.daemon_threads = True
        for srv in (cmd, met):
            threading.Thread(target=srv.serve_forever, daemon=True).start()
            self._servers.append(srv)
        return cmd.server_address[1], met.server_address[1]

    def shutdown(self) -> None:
        for srv in self._servers:
            srv.shutdown()
            srv.server_close()
        self._servers.clear()
        with self._lock:
            tasks = list(self.tasks.values())
        for t in tasks:
            t._stop.set()
            if t.kernel is not None and t.kernel.running:
                t.kernel.stop()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def main_loop(agent: Agent, command_port: int, metrics_port: int, host: str = "0.0.0.0") -> None:
    ports = agent.serve(command_port, metrics_port, host)
    log.info("agent listening: commands on %d, metrics on %d", *ports)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        agent.shutdown()
