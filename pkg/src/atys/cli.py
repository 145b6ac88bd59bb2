"""``atys`` command line: controller subcommands plus the agent daemon.

Exit codes: 0 success, 1 total failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .agent import Agent, main_loop
from .calibration import CalibrationError, Infeasible
from .controller import ConfigError, Controller, NoData, UnknownTask, calibrate_file, load_config

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _print(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")


def cmd_start(args, ctl: Controller) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = ctl.start_task(config)
    _print(summary)
    return EXIT_FAILED if summary["all_failed"] else EXIT_OK


def _fanout_cmd(fn, args) -> int:
    try:
        summary = fn(args.task)
    except UnknownTask:
        print(f"unknown task {args.task!r}", file=sys.stderr)
        return EXIT_FAILED
    _print(summary)
    return EXIT_FAILED if summary["all_failed"] else EXIT_OK


def cmd_aggregate(args, ctl: Controller) -> int:
    try:
        report = ctl.aggregate_global(args.task, args.out, args.group_size)
    except UnknownTask:
        print(f"unknown task {args.task!r}", file=sys.stderr)
        return EXIT_FAILED
    except NoData as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAILED
    report.pop("flamegraph")
    _print(report)
    return EXIT_OK


def cmd_calibrate(args, ctl: Controller) -> int:
    try:
        report = calibrate_file(args.samples, args.epsilon)
    except Infeasible as exc:
        _print({"error": "Infeasible", "message": str(exc), "mape_at_max": exc.mape_at_max})
        return EXIT_FAILED
    except (CalibrationError, OSError) as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    _print(report)
    return EXIT_OK


def cmd_watch(args, ctl: Controller) -> int:
    try:
        ctl.watch(args.task, args.out, args.rounds)
    except UnknownTask:
        print(f"unknown task {args.task!r}", file=sys.stderr)
        return EXIT_FAILED
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_agent(args, ctl) -> int:
    agent = Agent(token=args.token, data_dir=args.data_dir)
    main_loop(agent, args.command_port, args.metrics_port, args.host)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atys", description="Distributed hotspot-function profiling.")
    parser.add_argument("--state-dir", help="where started tasks are recorded (default $ATYS_STATE_DIR or ~/.atys)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("start", help="start a profiling task on every configured target")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_start)

    p = sub.add_parser("stop", help="stop a task and flush its final windows")
    p.add_argument("--task", required=True)
    p.set_defaults(func=lambda a, c: _fanout_cmd(c.stop_task, a))

    p = sub.add_parser("status", help="per-instance task states")
    p.add_argument("--task", required=True)
    p.set_defaults(func=lambda a, c: _fanout_cmd(c.status, a))

    p = sub.add_parser("aggregate", help="merge local flamegraphs into a global one")
    p.add_argument("--task", required=True)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("watch", help="aggregate periodically (aggregation.pull_every_n_windows)")
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("calibrate", help="fit pruning curves and recommend a retention percentile")
    p.add_argument("--samples", required=True, help="CSV rows p,time_seconds,mape_percent")
    p.add_argument("--epsilon", type=float, required=True, help="maximum acceptable MAPE in percent")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("agent", help="run a node agent")
    p.add_argument("--command-port", type=int, default=7070)
    p.add_argument("--metrics-port", type=int, default=9464)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--token", default=None)
    p.add_argument("--data-dir", default=None)
    p.set_defaults(func=cmd_agent)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctl = Controller(args.state_dir)
    return args.func(args, ctl)


if __name__ == "__main__":
    sys.exit(main())
