"""Central controller: task configs, fan-out to agents, global flamegraphs, calibration.

Agents speak newline-delimited JSON over TCP. Fan-out runs with bounded
parallelism. A target that cannot be reached is reported and skipped, never
fatal for the rest of the fleet.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from . import flamegraph as fgm
from .agent import write_atomic
from .calibration import calibrate as fit_and_solve
from .calibration import CalibrationError, read_samples_csv
from .profile import top_functions

log = logging.getLogger(__name__)

MAX_IN_FLIGHT = 64


class ConfigError(ValueError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ConnectionFailed(RuntimeError):
    pass


class NoData(RuntimeError):
    pass


class UnknownTask(KeyError):
    pass


# -- config ---------------------------------------------------------------

@dataclass
class Target:
    host: str
    command_port: int
    instance_id: str
    process: dict | None = None
    kernel: dict | None = None


@dataclass
class Sampling:
    initial_frequency_hz: float = 1000.0
    window_seconds: float = 10.0
    theta: float = 0.5
    lambda_: float = 0.8
    stable_windows_required: int = 5
    k: int = 10
    f_min_hz: float = 10.0
    f_max_hz: float = 10_000.0
    fda_enabled: bool = True
    fsp_percentile: float = 99.0
    top_k: int = 10


@dataclass
class Aggregation:
    pull_every_n_windows: int | None = None
    group_size: int | None = None


@dataclass
class TaskConfig:
    service: str
    targets: list
    sampling: Sampling = field(default_factory=Sampling)
    aggregation: Aggregation = field(default_factory=Aggregation)
    task_id: str | None = None
    token: str | None = None

    def agent_config(self, target: Target, manual: bool = False) -> dict:
        s = self.sampling
        cfg = {
            "service": self.service,
            "instance": target.instance_id,
            "window_seconds": s.window_seconds,
            "initial_frequency_hz": s.initial_frequency_hz,
            "fsp_percentile": s.fsp_percentile,
            "top_k": s.top_k,
            "fda": {
                "enabled": s.fda_enabled,
                "theta": s.theta,
                "lambda_": s.lambda_,
                "stable_windows_required": s.stable_windows_required,
                "k": s.k,
                "f_min_hz": s.f_min_hz,
                "f_max_hz": s.f_max_hz,
            },
        }
        if target.kernel:
            cfg["kernel"] = dict(target.kernel)
        if target.process:
            cfg["process"] = dict(target.process)
        if manual:
            cfg["manual"] = True
        return cfg

    def to_dict(self) -> dict:
        """Config document in the input schema, so ``parse_config(c.to_dict()) == c``."""
        d = asdict(self)
        s = d.pop("sampling")
        fda = {k: s.pop(k) for k in ("theta", "stable_windows_required", "k", "f_min_hz", "f_max_hz")}
        fda["lambda"] = s.pop("lambda_")
        fda["enabled"] = s.pop("fda_enabled")
        s["fda"] = fda
        d["sampling"] = s
        d["targets"] = [{k: v for k, v in t.items() if v is not None} for t in d["targets"]]
        return {k: v for k, v in d.items() if v is not None}


def _num(d: Mapping, key: str, path: str, default, kind=float, lo=None, hi=None,
         lo_open=False, hi_open=False):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(f"{path}.{key}" if path else key, f"expected an integer, got {v!r}")
    v = kind(v)
    where = f"{path}.{key}" if path else key
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(where, f"{v} is below the allowed range")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(where, f"{v} is above the allowed range")
    return v


def parse_config(doc: Mapping) -> TaskConfig:
    """Validate a config document and fill defaults."""
    if not isinstance(doc, Mapping):
        raise ConfigError("$", "config must be a JSON object")
    service = doc.get("service")
    if not isinstance(service, str) or not service:
        raise ConfigError("service", "a non-empty string is required")
    raw_targets = doc.get("targets")
    if not isinstance(raw_targets, list) or not raw_targets:
        raise ConfigError("targets", "at least one target is required")
    targets = []
    seen = set()
    for i, t in enumerate(raw_targets):
        where = f"targets[{i}]"
        if not isinstance(t, Mapping):
            raise ConfigError(where, "target must be an object")
        host = t.get("host", "127.0.0.1")
        if not isinstance(host, str) or not host:
            raise ConfigError(f"{where}.host", "a non-empty string is required")
        port = _num(t, "command_port", where, None, int, 1, 65535)
        if port is None:
            raise ConfigError(f"{where}.command_port", "required")
        inst = t.get("instance_id")
        if not isinstance(inst, str) or not inst:
            raise ConfigError(f"{where}.instance_id", "a non-empty string is required")
        if inst in seen:
            raise ConfigError(f"{where}.instance_id", f"duplicate instance id {inst!r}")
        seen.add(inst)
        process, kernel = t.get("process"), t.get("kernel")
        if process is None and kernel is None:
            raise ConfigError(where, "either 'process' or 'kernel' is required")
        if process is not None and (not isinstance(process, Mapping) or not process.get("executable_name")):
            raise ConfigError(f"{where}.process.executable_name", "required")
        if kernel is not None and (not isinstance(kernel, Mapping) or "kind" not in kernel):
            raise ConfigError(f"{where}.kernel.kind", "required")
        targets.append(Target(host, port, inst, dict(process) if process else None, dict(kernel) if kernel else None))

    s = doc.get("sampling") or {}
    if not isinstance(s, Mapping):
        raise ConfigError("sampling", "must be an object")
    fda = s.get("fda") or {}
    if not isinstance(fda, Mapping):
        raise ConfigError("sampling.fda", "must be an object")
    lam_key = "lambda" if "lambda" in fda else "lambda_"
    d = Sampling()
    sampling = Sampling(
        initial_frequency_hz=_num(s, "initial_frequency_hz", "sampling", d.initial_frequency_hz, lo=0, lo_open=True),
        window_seconds=_num(s, "window_seconds", "sampling", d.window_seconds, lo=0, lo_open=True),
        theta=_num(fda, "theta", "sampling.fda", d.theta, lo=0, hi=1, lo_open=True, hi_open=True),
        lambda_=_num(fda, lam_key, "sampling.fda", d.lambda_, lo=0, hi=1, lo_open=True, hi_open=True),
        stable_windows_required=_num(fda, "stable_windows_required", "sampling.fda", d.stable_windows_required, int, 1),
        k=_num(fda, "k", "sampling.fda", d.k, int, 1),
        f_min_hz=_num(fda, "f_min_hz", "sampling.fda", d.f_min_hz, lo=0, lo_open=True),
        f_max_hz=_num(fda, "f_max_hz", "sampling.fda", d.f_max_hz, lo=0, lo_open=True),
        fda_enabled=bool(fda.get("enabled", True)),
        fsp_percentile=_num(s, "fsp_percentile", "sampling", d.fsp_percentile, lo=0, hi=100, lo_open=True),
        top_k=_num(s, "top_k", "sampling", d.top_k, int, 1),
    )
    if sampling.f_min_hz >= sampling.f_max_hz:
        raise ConfigError("sampling.fda.f_min_hz", "must be below f_max_hz")
    if not sampling.f_min_hz <= sampling.initial_frequency_hz <= sampling.f_max_hz:
        raise ConfigError("sampling.initial_frequency_hz", "must lie within [f_min_hz, f_max_hz]")

    a = doc.get("aggregation") or {}
    if not isinstance(a, Mapping):
        raise ConfigError("aggregation", "must be an object")
    aggregation = Aggregation(
        pull_every_n_windows=_num(a, "pull_every_n_windows", "aggregation", None, int, 1),
        group_size=_num(a, "group_size", "aggregation", None, int, 2),
    )
    task_id = doc.get("task_id")
    if task_id is not None and (not isinstance(task_id, str) or not task_id):
        raise ConfigError("task_id", "must be a non-empty string")
    token = doc.get("token")
    return TaskConfig(service, targets, sampling, aggregation, task_id, token)


def load_config(path) -> TaskConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("$", f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return parse_config(doc)


# -- transport ------------------------------------------------------------

class AgentClient:
    """One request/response exchange per call over a fresh connection."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout

    def send(self, target: Target, msg: Mapping) -> dict:
        try:
            with socket.create_connection((target.host, target.command_port), timeout=self.timeout) as sock:
                sock.sendall((json.dumps(msg) + "\n").encode())
                with sock.makefile("rb") as f:
                    line = f.readline()
        except OSError as exc:
            raise ConnectionFailed(f"{target.host}:{target.command_port}: {exc}") from None
        if not line:
            raise ConnectionFailed(f"{target.host}:{target.command_port}: connection closed without a response")
        try:
            return json.loads(line)
        except ValueError as exc:
            raise ConnectionFailed(f"{target.host}:{target.command_port}: bad response: {exc}") from None


def bounded_map(fn: Callable, items: Iterable, max_workers: int = MAX_IN_FLIGHT) -> Iterator:
    """Ordered ``map`` over a thread pool with at most ``max_workers`` results pending."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= max_workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


# -- controller -----------------------------------------------------------

class Controller:
    """Task registry plus fan-out operations.

    Registered tasks are persisted as JSON under ``state_dir`` so each CLI
    invocation can find the targets of a task started earlier.
    """

    def __init__(self, state_dir=None, client: AgentClient | None = None, max_in_flight: int = MAX_IN_FLIGHT):
        self.state_dir = Path(state_dir or os.environ.get("ATYS_STATE_DIR") or Path.home() / ".atys")
        self.client = client or AgentClient()
        self.max_in_flight = max_in_flight

    # registry
    def _task_file(self, task_id: str) -> Path:
        return self.state_dir / "tasks" / f"{task_id}.json"

    def register(self, task_id: str, config: TaskConfig) -> None:
        write_atomic(self._task_file(task_id), json.dumps({"task_id": task_id, "config": config.to_dict()}, indent=2))

    def lookup(self, task_id: str) -> TaskConfig:
        try:
            doc = json.loads(self._task_file(task_id).read_text())
        except FileNotFoundError:
            raise UnknownTask(task_id) from None
        return parse_config(doc["config"])

    def _fanout(self, config: TaskConfig, make_msg: Callable) -> list:
        def one(target: Target) -> dict:
            msg = make_msg(target)
            if config.token is not None:
                msg["token"] = config.token
            try:
                resp = self.client.send(target, msg)
            except ConnectionFailed as exc:
                return {"instance_id": target.instance_id, "ok": False,
                        "error": {"code": "ConnectionFailed", "message": str(exc)}}
            return {"instance_id": target.instance_id, **resp}

        return list(bounded_map(one, config.targets, self.max_in_flight))

    def start_task(self, config: TaskConfig, manual: bool = False) -> dict:
        task_id = config.task_id or uuid.uuid4().hex[:12]
        self.register(task_id, config)
        results = self._fanout(config, lambda t: {
            "type": "START", "task_id": task_id, "config": config.agent_config(t, manual)})
        for r in results:
            if not r.get("ok"):
                r.setdefault("state", "Failed")
        return _summary(task_id, results)

    def stop_task(self, task_id: str) -> dict:
        config = self.lookup(task_id)
        results = self._fanout(config, lambda t: {"type": "STOP", "task_id": task_id})
        # final flamegraphs are large; keep only their totals in the summary
        for r in results:
            if "folded" in r:
                r.pop("folded")
        return _summary(task_id, results)

    def status(self, task_id: str) -> dict:
        config = self.lookup(task_id)
        results = self._fanout(config, lambda t: {"type": "STATUS", "task_id": task_id})
        for r in results:
            if r.get("ok") and r.get("tasks"):
                r.update(r.pop("tasks")[0])
        return _summary(task_id, results)

    def aggregate_global(self, task_id: str, out_dir=None, group_size: int | None = None,
                         config: TaskConfig | None = None) -> dict:
        """Pull every local flamegraph, merge them and write the global artifacts.

        Instances that fail to answer are listed in the report and left out.
        """
        config = config or self.lookup(task_id)
        group_size = group_size or config.aggregation.group_size
        t0 = time.monotonic()
        instances: list = []
        failed: list = []

        def pull(target: Target):
            msg = {"type": "PULL_FLAMEGRAPH", "task_id": task_id}
            if config.token is not None:
                msg["token"] = config.token
            try:
                resp = self.client.send(target, msg)
            except ConnectionFailed as exc:
                return target, None, {"code": "ConnectionFailed", "message": str(exc)}
            if not resp.get("ok"):
                return target, None, resp.get("error", {"code": "Unknown", "message": ""})
            try:
                fg = fgm.parse_flamegraph(resp.get("folded", ""), config.service, int(resp.get("windows_completed", 0)))
            except ValueError as exc:
                return target, None, {"code": "MalformedFlamegraph", "message": str(exc)}
            if resp.get("frequency_hz"):
                fg.meta.frequencies = (float(resp["frequency_hz"]),)
            return target, (fg, resp), None

        def graphs():
            for target, got, err in bounded_map(pull, config.targets, self.max_in_flight):
                if err is not None:
                    failed.append({"instance_id": target.instance_id, "error": err})
                    continue
                fg, resp = got
                selfs: dict = {}
                get = selfs.get
                for key, v in fg.paths.items():
                    leaf = key[key.rfind(fgm.SEP) + 1:]
                    selfs[leaf] = get(leaf, 0) + v
                top = top_functions(selfs, config.sampling.top_k)
                instances.append({
                    "instance_id": target.instance_id,
                    "total_samples": fg.total,
                    "windows_completed": resp.get("windows_completed", 0),
                    "final_frequency_hz": resp.get("frequency_hz"),
                    "pruned_threads": resp.get("pruned_threads"),
                    "retained_threads": resp.get("retained_threads"),
                    "top": [{"function": f, "self_samples": selfs[f]} for f in top],
                })
                yield fg

        try:
            if group_size:
                merged = fgm.hierarchical_aggregate(graphs(), group_size)
            else:
                merged = fgm.merge_all(graphs())
        except fgm.EmptyInput:
            raise NoData(f"no instance of task {task_id!r} returned a flamegraph "
                         f"({len(failed)} failed)") from None
        t_merge = time.monotonic() - t0

        local_total = sum(i["total_samples"] for i in instances)
        assert merged.total == local_total
        instances.sort(key=lambda i: i["instance_id"])
        failed.sort(key=lambda i: i["instance_id"])
        report = {
            "task_id": task_id,
            "service": config.service,
            "window_index": merged.meta.window_index,
            "global_total_samples": merged.total,
            "instances_merged": len(instances),
            "group_size": group_size,
            "rounds": fgm.group_rounds(len(instances), group_size) if group_size else None,
            "instances": instances,
            "failed": failed,
            "timing": {"pull_and_merge_seconds": t_merge},
        }
        if out_dir is not None:
            out = Path(out_dir)
            stem = f"{config.service}_{merged.meta.window_index}_global"
            folded_path, json_path = out / f"{stem}.folded", out / f"{stem}.json"
            write_atomic(folded_path, fgm.emit_folded(merged))
            write_atomic(json_path, fgm.emit_json(merged))
            report["files"] = {"folded": str(folded_path), "json": str(json_path)}
            report_path = out / f"{config.service}_{merged.meta.window_index}_report.json"
            report["files"]["report"] = str(report_path)
            write_atomic(report_path, json.dumps(report, indent=2))
        report["flamegraph"] = merged
        return report

    def watch(self, task_id: str, out_dir, rounds: int | None = None) -> None:
        """Aggregate every ``pull_every_n_windows`` windows until interrupted."""
        config = self.lookup(task_id)
        every = config.aggregation.pull_every_n_windows or 1
        done = 0
        while rounds is None or done < rounds:
            time.sleep(every * config.sampling.window_seconds)
            try:
                self.aggregate_global(task_id, out_dir, config=config)
            except NoData as exc:
                log.warning("%s", exc)
            done += 1


def _summary(task_id: str, results: list) -> dict:
    ok = sum(1 for r in results if r.get("ok"))
    return {
        "task_id": task_id,
        "succeeded": ok,
        "failed": len(results) - ok,
        "all_failed": ok == 0,
        "instances": sorted(results, key=lambda r: r["instance_id"]),
    }


def calibrate_file(csv_path, epsilon: float) -> dict:
    """Run calibration on a ``p,time_seconds,mape_percent`` CSV file."""
    path = Path(csv_path)
    samples = read_samples_csv(path.read_text(), str(path))
    try:
        report = fit_and_solve(samples, epsilon)
    except CalibrationError as exc:
        exc.args = (f"{path}: {exc}",)
        raise
    report["source"] = str(path)
    report["rows"] = len(samples)
    return report
