import json
import socket
import threading
import urllib.request

import pytest
from prometheus_client.parser import text_string_to_metric_families

from atys import flamegraph as fg
from atys.agent import (
    FAMILIES,
    Agent,
    BadConfig,
    FunctionMetric,
    MetricsSnapshot,
    ProfilingTask,
    TaskSpec,
    TaskState,
    escape_label,
    render_exposition,
    run_window,
)


def replay_cfg(folded, **kw):
    cfg = {"service": "svc", "instance": "i1", "kernel": {"kind": "replay", "folded": folded, "loop": True},
           "window_seconds": 1.0, "initial_frequency_hz": 1000, "manual": True}
    cfg.update(kw)
    return cfg


CORPUS = "main;a 400\nmain;b 300\nmain;c;d 200\nmain;e 100\n"


def manual_task(cfg) -> tuple:
    agent = Agent()
    agent.start_task("t1", cfg)
    return agent, agent.tasks["t1"]


def families(text):
    return {f.name: f for f in text_string_to_metric_families(text)}


def test_start_ack_and_unknown_stop():
    agent = Agent()
    resp = agent.handle_command({"type": "START", "task_id": "t1", "config": replay_cfg(CORPUS)})
    assert resp["ok"] and resp["state"] == "Running" and resp["task_id"] == "t1"
    resp = agent.handle_command({"type": "STOP", "task_id": "nope"})
    assert resp == {"ok": False, "error": {"code": "UnknownTask", "message": "no task 'nope'"}}
    dup = agent.handle_command({"type": "START", "task_id": "t1", "config": replay_cfg(CORPUS)})
    assert dup["error"]["code"] == "DuplicateTaskId"


@pytest.mark.parametrize("msg,code", [
    ([], "BadRequest"),
    ({"type": "DANCE"}, "BadRequest"),
    ({"type": "STOP"}, "BadRequest"),
    ({"type": "START", "task_id": "x", "config": {"kernel": {"kind": "replay"}}}, "BadConfig"),
    ({"type": "START", "task_id": "x", "config": {"service": "s"}}, "BadConfig"),
    ({"type": "START", "task_id": "x", "config": replay_cfg(CORPUS, fsp_percentile=0)}, "BadConfig"),
    ({"type": "START", "task_id": "x", "config": replay_cfg(CORPUS, fda={"theta": 2})}, "BadConfig"),
])
def test_command_errors(msg, code):
    assert Agent().handle_command(msg)["error"]["code"] == code


def test_token_required():
    agent = Agent(token="s3cret")
    assert agent.handle_command({"type": "STATUS"})["error"]["code"] == "Unauthorized"
    assert agent.handle_command({"type": "STATUS", "token": "s3cret"}) == {"ok": True, "tasks": []}


def test_process_descriptor_selects_kernel():
    with pytest.raises(BadConfig):
        TaskSpec.from_dict({"process": {"pid": "1"}})
    spec = TaskSpec.from_dict({"process": {"pid": "9", "executable_name": "java"}})
    assert spec.kernel_kind.value == "jvm" and spec.kernel_config["pid"] == "9"
    assert spec.language == "java"


def test_pull_after_three_windows_matches_pruned_totals():
    agent, task = manual_task(replay_cfg(CORPUS))
    totals = []
    for _ in range(3):
        snap = run_window(task)
        totals.append(snap.total_samples)
    pulled = agent.pull_flamegraph("t1")
    assert pulled["total_samples"] == task.total_samples
    assert fg.parse_flamegraph(pulled["folded"]).total == task.total_samples
    assert pulled["windows_completed"] == 3
    assert totals == sorted(totals)


def test_cpu_seconds_from_window_frequency():
    # 1000 samples at 1000 Hz, top function holds 40%
    agent, task = manual_task(replay_cfg(CORPUS, fda={"enabled": False}))
    snap = run_window(task)
    top = snap.functions[0]
    assert top.name == "a" and top.self_samples == 400
    assert top.cpu_seconds == pytest.approx(0.4)
    assert top.share == pytest.approx(0.4)
    assert snap.frequency_hz == 1000


def test_pruning_happens_before_publication():
    text = "T1;main;hot 900\nT2;main;warm 95\nT3;main;rare 5\n"
    cfg = replay_cfg(text, fsp_percentile=99)
    cfg["kernel"]["thread_aware"] = True
    agent, task = manual_task(cfg)
    snap = run_window(task)
    assert snap.pruned_threads == 1 and snap.retained_threads == 2
    names = {f.name for f in snap.functions}
    assert "rare" not in names
    assert "rare" not in agent.pull_flamegraph("t1")["folded"]


def test_exported_series_bounded_by_k_and_conserved():
    lines = "".join(f"main;f{i:02d} {i + 1}\n" for i in range(30))
    agent, task = manual_task(replay_cfg(lines, top_k=10, initial_frequency_hz=465))
    for _ in range(3):
        snap = run_window(task)
    assert len(snap.functions) == 10
    assert sum(f.self_samples for f in snap.functions) <= task.total_samples
    fams = families(agent.render_metrics())
    assert len(fams["atys_function_samples"].samples) == 10


def test_conservation_equality_when_few_functions():
    agent, task = manual_task(replay_cfg(CORPUS))
    for _ in range(4):
        snap = run_window(task)
    assert sum(f.self_samples for f in snap.functions) == task.total_samples


def test_stable_workload_frequency_non_increasing():
    cfg = {"service": "svc", "instance": "i", "window_seconds": 1.0, "manual": True,
           "initial_frequency_hz": 2000,
           "kernel": {"kind": "synthetic", "workload": {
               "call_tree": {"main": {"children": {"a": 6, "b": 3, "c": 1}}}, "root": "main", "seed": 1}}}
    agent, task = manual_task(cfg)
    freqs = [run_window(task).frequency_hz for _ in range(30)]
    assert all(x >= y for x, y in zip(freqs, freqs[1:]))
    assert freqs[-1] < 2000


def test_empty_window_keeps_frequency_and_drops_divergence():
    agent, task = manual_task(replay_cfg(CORPUS, initial_frequency_hz=250,
                                              kernel={"kind": "replay", "folded": CORPUS}))
    run_window(task)
    snap = run_window(task)
    assert snap.js_divergence is not None
    while task.kernel.cursor < task.kernel.total:
        run_window(task)
    before = task.snapshot
    snap = run_window(task)
    assert snap.frequency_hz == before.frequency_hz
    assert snap.js_divergence is None
    assert snap.windows_completed == before.windows_completed + 1
    assert snap.functions == before.functions
    assert "atys_js_divergence{" not in render_exposition([snap])


def test_exposition_empty_agent_has_headers_only():
    text = Agent().render_metrics()
    fams = families(text)
    assert set(fams) == {n.removesuffix("_total") for n, _, _ in FAMILIES}
    assert all(not f.samples for f in fams.values())
    for name, kind, _ in FAMILIES:
        assert f"# TYPE {name} {kind}" in text


def test_label_escaping_round_trips():
    weird = 'fn "quoted" \\ back\nslash'
    assert escape_label(weird) == 'fn \\"quoted\\" \\\\ back\\nslash'
    snap = MetricsSnapshot("s", "i", "t", (FunctionMetric(weird, 3, 0.003, 1.0),), 100.0, 0.2, 0, 1, 1, 3)
    fams = families(render_exposition([snap]))
    assert fams["atys_function_samples"].samples[0].labels["function"] == weird
    assert fams["atys_js_divergence"].samples[0].value == 0.2


def test_scrape_during_windows_sees_whole_snapshots():
    cfg = {"service": "svc", "instance": "i", "window_seconds": 1.0, "manual": True,
           "initial_frequency_hz": 3000, "kernel": {"kind": "synthetic", "workload": {
               "call_tree": {"main": {"children": {f"f{i}": i + 1 for i in range(12)}}}, "root": "main"}}}
    agent, task = manual_task(cfg)
    seen = []
    stop = threading.Event()

    def scraper():
        while not stop.is_set():
            seen.append(families(agent.render_metrics()))

    th = threading.Thread(target=scraper)
    th.start()
    snaps = [task.snapshot] + [run_window(task) for _ in range(20)]
    stop.set()
    th.join()
    valid = {}
    for s in snaps:
        fams = families(render_exposition([s]))
        valid[s.windows_completed] = {
            n: sorted((tuple(sorted(x.labels.items())), x.value) for x in f.samples) for n, f in fams.items()}
    assert seen
    for doc in seen:
        got = {n: sorted((tuple(sorted(x.labels.items())), x.value) for x in f.samples) for n, f in doc.items()}
        w = int(got["atys_windows_completed"][0][1])
        assert got == valid[w]


def test_stop_flushes_and_writes_local_files(tmp_path):
    agent = Agent(data_dir=tmp_path)
    agent.start_task("t1", replay_cfg(CORPUS))
    run_window(agent.tasks["t1"])
    resp = agent.stop_task("t1")
    assert resp["state"] == "Stopped" and resp["windows_completed"] == 2
    assert agent.tasks["t1"].state is TaskState.STOPPED
    assert (tmp_path / "svc_2_local.folded").read_text() == resp["folded"]
    doc = json.loads((tmp_path / "svc_2_local.json").read_text())
    assert doc["value"] == resp["total_samples"]
    again = agent.handle_command({"type": "STOP", "task_id": "t1"})
    assert again["error"]["code"] == "InvalidState"


def test_failing_kernel_marks_task_failed(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys\nsys.exit(2)\n")
    agent = Agent()
    agent.start_task("t1", {"service": "s", "window_seconds": 0.2,
                            "kernel": {"kind": "exec", "command": f"python3 {script}"}})
    task = agent.tasks["t1"]
    task._thread.join(timeout=10)
    assert task.state is TaskState.FAILED and "exited" in task.reason


def _send(port, *msgs):
    with socket.create_connection(("127.0.0.1", port), timeout=10) as s:
        f = s.makefile("rwb")
        out = []
        for m in msgs:
            f.write((m if isinstance(m, bytes) else json.dumps(m).encode()) + b"\n")
            f.flush()
            out.append(json.loads(f.readline()))
        return out


def test_wire_protocol_and_http_endpoint():
    agent = Agent()
    cmd_port, met_port = agent.serve()
    try:
        start, status, bad, pull = _send(
            cmd_port,
            {"type": "START", "task_id": "w1", "config": replay_cfg(CORPUS)},
            {"type": "STATUS", "task_id": "w1"},
            b"{not json",
            {"type": "PULL_FLAMEGRAPH", "task_id": "w1"},
        )
        assert start["ok"] and status["tasks"][0]["state"] == "Running"
        assert bad["error"]["code"] == "BadRequest"
        assert pull["ok"] and pull["total_samples"] == 0
        run_window(agent.tasks["w1"])
        body = urllib.request.urlopen(f"http://127.0.0.1:{met_port}/metrics", timeout=10).read().decode()
        fams = families(body)
        assert fams["atys_windows_completed"].samples[0].value == 1
        with pytest.raises(urllib.error.HTTPError):
            urllib.request.urlopen(f"http://127.0.0.1:{met_port}/other", timeout=10)
    finally:
        agent.shutdown()


def test_spec_defaults():
    spec = TaskSpec.from_dict({"kernel": {"kind": "replay", "folded": CORPUS}})
    assert (spec.window_seconds, spec.fsp_percentile, spec.top_k) == (10.0, 99.0, 10)
    assert spec.fda.theta == 0.5 and spec.fda.lambda_ == 0.8
    t = ProfilingTask("x", spec)
    assert t.state is TaskState.STARTING
