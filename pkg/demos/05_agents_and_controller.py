"""Three agents, one controller, one global flamegraph, all on localhost.

Each agent replays its own folded corpus as if it were sampling a live
process. The controller starts the task, polls status, stops it and merges
the local flamegraphs. The same steps are available from the shell as
``atys agent`` and ``atys start|status|stop|aggregate``.

    python demos/05_agents_and_controller.py
"""
import tempfile
import time
import urllib.request
from pathlib import Path

import numpy as np

from atys.agent import Agent
from atys.controller import Controller, parse_config

work = Path(tempfile.mkdtemp(prefix="atys-demo-"))
rng = np.random.default_rng(5)
funcs = ["parse", "query", "render", "encode", "auth", "cache_get", "log"]

agents, targets = [], []
for i in range(3):
    lines = []
    for f in funcs:
        # each node has its own idea of what is hot
        lines.append(f"main;handle;{f} {int(rng.integers(50, 2000))}")
    corpus = work / f"node{i}.folded"
    corpus.write_text("\n".join(lines) + "\n")
    agent = Agent(data_dir=work / f"node{i}")
    cmd_port, metrics_port = agent.serve()
    agents.append((agent, metrics_port))
    targets.append({"host": "127.0.0.1", "command_port": cmd_port, "instance_id": f"node{i}",
                    "kernel": {"kind": "replay", "path": str(corpus)}})

config = parse_config({"service": "shop", "task_id": "demo", "targets": targets,
                       "sampling": {"window_seconds": 0.5, "initial_frequency_hz": 5000, "fsp_percentile": 100}})
ctl = Controller(work / "state")
print("start:", ctl.start_task(config)["succeeded"], "of 3 agents")
time.sleep(1.6)

for inst in ctl.status("demo")["instances"]:
    print(f"  {inst['instance_id']}: {inst['state']}, {inst['windows_completed']} windows, "
          f"{inst['total_samples']} samples at {inst['frequency_hz']:.0f} Hz")

body = urllib.request.urlopen(f"http://127.0.0.1:{agents[0][1]}/metrics").read().decode()
print("\nnode0 /metrics (excerpt):")
print("\n".join([line for line in body.splitlines() if line.startswith("atys_function_samples")][:4]))

ctl.stop_task("demo")
report = ctl.aggregate_global("demo", work / "out")
print("\nglobal samples:", report["global_total_samples"], "from", report["instances_merged"], "instances")
print("written:", *report["files"].values(), sep="\n  ")
print((Path(report["files"]["folded"])).read_text(), end="")

for agent, _ in agents:
    agent.shutdown()
