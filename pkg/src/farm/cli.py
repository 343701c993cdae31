"""``farm`` command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``farm client``
instead exits with its :class:`~farm.client.ClientStatus` code (0 drained,
3 server lost, 143 terminated).
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _counts(text: str) -> dict[int, int]:
    from farm.sim.background import ConfigError, parse_weights
    try:
        w = parse_weights(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if any(v != int(v) for v in w.values()):
        raise argparse.ArgumentTypeError("counts must be integers")
    return {k: int(v) for k, v in w.items()}


def _setup_logging(verbose: bool, log_file: str | None = None) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers = [logging.FileHandler(log_file)]
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s",
                        handlers=handlers, force=True)


# -- server / client ---------------------------------------------------------

def cmd_server(args) -> int:
    from farm.server import FarmServer, LossPolicy, ServerConfig, ServerHost
    from farm.workloads import TaskFarmWorkload

    if args.mode == "taskfarm":
        workload = TaskFarmWorkload(args.tasks, args.work_ms)
    else:
        from farm.ea.workload import EaWorkload
        workload = EaWorkload(n_atoms=args.atoms, capacity=args.pool, tasks=args.tasks,
                              n_children=args.children, seed=args.seed,
                              time_budget_s=args.time_budget_s, dump_dir=args.dump_dir,
                              dump_every_s=args.dump_every_s)
    # Lost EA children are cheap to regenerate; lost task-farm tasks are not.
    policy = args.loss_policy or ("drop" if args.mode == "ea" else "reschedule")
    cfg = ServerConfig(lease_ms=args.lease_ms, chunk_max=args.chunk_max, loss_policy=LossPolicy(policy))
    core = FarmServer(cfg, workload)
    try:
        host = ServerHost(core, args.listen, drain_grace_ms=args.drain_grace_ms)
    except OSError as exc:
        logging.error("event=fatal error=%s", str(exc).replace(" ", "_"))
        return EXIT_FAILURE
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: threading.Thread(target=host.stop, daemon=True).start())
    with host:
        host.wait()
    summary = " ".join(f"{k}={v}" for k, v in workload.summary().items())
    logging.info("event=exit drained=%s %s", core.drain_complete, summary)
    return EXIT_OK if core.drain_complete else EXIT_FAILURE


def cmd_client(args) -> int:
    from farm.client import ClientConfig, ClientStatus, run_client

    server = args.server or os.environ.get("FARM_SERVER")
    if not server:
        raise UsageError("--server not given and FARM_SERVER is not set")
    try:
        address = _address(server)
    except argparse.ArgumentTypeError as exc:
        raise UsageError(str(exc)) from None
    # A batch system's termination signal means: leave now.
    signal.signal(signal.SIGTERM, lambda *_: os._exit(ClientStatus.KILLED.exit_code))
    cfg = ClientConfig(address, slots=args.slots, heartbeat_interval_ms=args.heartbeat_ms,
                       max_missed_acks=args.max_missed,
                       chunk_request_size=args.chunk_request or 2 * args.slots)
    return run_client(cfg).exit_code


# -- simulator -------------------------------------------------------------

def cmd_sim_run(args) -> int:
    from farm.sim.scenario import load_scenario, run_scenario, utilization
    from farm.sim.trace import write_trace

    sc = load_scenario(args.scenario)
    res = run_scenario(sc, seed=args.seed, policy=None if args.no_fillin else "default",
                       horizon_min=args.horizon_min, dispatch_delay_s=args.dispatch_delay_s)
    if args.trace:
        write_trace(res.samples, args.trace)
    if args.supervision_log:
        Path(args.supervision_log).write_text("".join(a.log_line() + "\n" for a in res.actions))
    if args.event_log:
        Path(args.event_log).write_text("".join(e.log_line() + "\n" for e in res.event_log))
    print(f"scenario={sc.name} seed={args.seed if args.seed is not None else sc.seed} "
          f"minutes={len(res.samples)} utilization={utilization(res.samples):.4f} "
          f"normal_jobs_started={len(res.normal_starts)} fillin_actions={len(res.actions)} "
          f"max_running_fillin={res.sim.max_running_fillin}")
    return EXIT_OK


def cmd_sim_plot(args) -> int:
    from farm.chart import ChartSpec, render_chart

    render_chart(ChartSpec(args.trace, args.output, title=args.title or Path(args.trace).stem))
    return EXIT_OK


# -- supervisor ------------------------------------------------------------

def _policy(args):
    from farm.supervisor.policies import DynamicFit, KeepQueued, StaticMix

    wall = args.walltime_min * 60
    if args.policy == "static":
        return StaticMix(args.mix or {1: 40, 4: 20, 8: 30}, wall, args.maintain)
    if args.policy == "keep":
        return KeepQueued(args.min_queued or {1: 5, 4: 5, 8: 5}, wall)
    return DynamicFit(args.interval_s, args.job_cap, args.max_walltime_min * 60)


def cmd_supervise(args) -> int:
    from farm.supervisor.runner import run_supervisor

    policy = _policy(args)
    if args.adapter == "sim":
        from farm.sim.scenario import load_scenario, run_scenario
        sc = load_scenario(args.scenario).with_(interval_s=args.interval_s)
        res = run_scenario(sc, seed=args.seed, policy=policy, horizon_min=args.horizon_min)
        for a in res.actions:
            print(a.log_line())
        return EXIT_OK
    if args.adapter == "process":
        from farm.supervisor.adapters import ProcessAdapter, client_command
        if not args.server:
            raise UsageError("--adapter process needs --server")
        adapter = ProcessAdapter(client_command(args.server, args.heartbeat_ms, args.max_missed), args.budget)
    else:
        from farm.supervisor.adapters import TemplateAdapter
        if not (args.submit_cmd and args.cancel_cmd and args.query_cmd):
            raise UsageError("--adapter template needs --submit-cmd, --cancel-cmd and --query-cmd")
        adapter = TemplateAdapter(args.submit_cmd, args.cancel_cmd, args.query_cmd)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    lines = run_supervisor(policy, adapter, args.interval_s, args.horizon_s, stop=stop,
                           retry_budget=args.retry_budget, out=sys.stdout)
    if args.adapter == "process":
        adapter.kill_all()
    failed = any("reason=adapter_failed" in line for line in lines)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_demo(args) -> int:
    from farm.demo import DemoConfig, parse_budget_script, run_demo

    try:
        script = parse_budget_script(args.budget_script)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = DemoConfig(Path(args.out_dir), duration_s=args.duration_s, budget_script=script,
                     interval_s=args.interval_s, seed=args.seed, pool=args.pool,
                     heartbeat_ms=args.heartbeat_ms, max_missed=args.max_missed)
    report = run_demo(cfg)
    print(f"ok={report.ok} clients_started={report.clients_started} preempted={report.preempted} "
          f"completed_tasks={report.completed_tasks} dumps={len(report.best_by_dump)} "
          f"best={report.best_by_dump[-1] if report.best_by_dump else 'none'} trace={report.trace}")
    for p in report.problems:
        print(f"problem={p.replace(' ', '_')}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_FAILURE


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="farm", description="Malleable task farm, cluster simulator and fill-in supervisor.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("server", help="run a farm server until its workload drains")
    s.add_argument("--listen", type=_address, default=("127.0.0.1", 7878), metavar="HOST:PORT",
                   help="listen address (port 0 picks a free port; default 127.0.0.1:7878)")
    s.add_argument("--lease-ms", type=_positive_int, default=5000, help="client lease length (default 5000)")
    s.add_argument("--chunk-max", type=_positive_int, default=8, help="max tasks per chunk (default 8)")
    s.add_argument("--loss-policy", choices=("reschedule", "drop"), default=None,
                   help="what happens to tasks of a lost client (default: drop for ea, reschedule for taskfarm)")
    s.add_argument("--mode", choices=("taskfarm", "ea"), default="taskfarm", help="workload (default taskfarm)")
    s.add_argument("--tasks", type=int, default=1000, help="task count / task budget (default 1000)")
    s.add_argument("--work-ms", type=int, default=0, help="taskfarm: sleep per task in ms (default 0)")
    s.add_argument("--atoms", type=int, default=13, help="ea: atoms per cluster (default 13)")
    s.add_argument("--pool", type=int, default=20, help="ea: pool capacity (default 20)")
    s.add_argument("--children", type=int, default=1, help="ea: children per task (default 1)")
    s.add_argument("--seed", type=int, default=0, help="ea: random seed (default 0)")
    s.add_argument("--time-budget-s", type=float, default=None, help="ea: stop generating tasks after this")
    s.add_argument("--dump-dir", default=None, help="ea: directory for pool dumps")
    s.add_argument("--dump-every-s", type=float, default=None, help="ea: seconds between pool dumps")
    s.add_argument("--drain-grace-ms", type=int, default=None,
                   help="after draining, wait this long for clients to leave (default: lease length)")
    s.add_argument("--log-file", default=None, help="write the event log here instead of stderr")
    s.set_defaults(func=cmd_server)

    c = sub.add_parser("client", help="attach to a server and compute until drained or lost")
    c.add_argument("--server", default=None, metavar="HOST:PORT",
                   help="server address (default: $FARM_SERVER)")
    c.add_argument("--slots", type=_positive_int, default=1, help="parallel tasks (default 1)")
    c.add_argument("--heartbeat-ms", type=_positive_int, default=500, help="heartbeat interval (default 500)")
    c.add_argument("--max-missed", type=_positive_int, default=4,
                   help="unacknowledged heartbeats before giving up (default 4)")
    c.add_argument("--chunk-request", type=_positive_int, default=None,
                   help="tasks requested per chunk (default 2 x slots)")
    c.add_argument("--log-file", default=None, help="write the event log here instead of stderr")
    c.set_defaults(func=cmd_client)

    sim = sub.add_parser("sim", help="cluster scheduler simulator")
    simsub = sim.add_subparsers(dest="sim_command", required=True, parser_class=_Parser)
    r = simsub.add_parser("run", help="simulate a scenario")
    r.add_argument("scenario", help="built-in name (local, center, hlrn) or scenario file")
    r.add_argument("--seed", type=int, default=None, help="random seed (default: from scenario)")
    r.add_argument("--trace", default=None, help="write the per-minute load trace CSV here")
    r.add_argument("--horizon-min", type=int, default=None, help="simulated minutes (default: from scenario)")
    r.add_argument("--dispatch-delay-s", type=float, default=None,
                   help="scheduler cycle in seconds (default: from scenario)")
    r.add_argument("--no-fillin", action="store_true", help="disable the fill-in policy")
    r.add_argument("--supervision-log", default=None, help="write fill-in submit/cancel actions here")
    r.add_argument("--event-log", default=None, help="write scheduler events here")
    r.set_defaults(func=cmd_sim_run)
    pl = simsub.add_parser("plot", help="render a trace CSV as a stacked SVG chart")
    pl.add_argument("trace", help="trace CSV")
    pl.add_argument("-o", "--output", required=True, help="output SVG path")
    pl.add_argument("--title", default=None, help="chart title (default: trace file name)")
    pl.set_defaults(func=cmd_sim_plot)

    sv = sub.add_parser("supervise", help="keep fill-in jobs supplied")
    sv.add_argument("--policy", choices=("static", "keep", "dynamic"), required=True, help="supply policy")
    sv.add_argument("--adapter", choices=("sim", "process", "template"), required=True, help="scheduler adapter")
    sv.add_argument("--interval-s", type=float, default=60.0, help="seconds between ticks (default 60)")
    sv.add_argument("--mix", type=_counts, default=None, help="static: size:count list (default 1:40,4:20,8:30)")
    sv.add_argument("--maintain", action="store_true", help="static: resubmit lost jobs")
    sv.add_argument("--min-queued", type=_counts, default=None, help="keep: size:count list (default 1:5,4:5,8:5)")
    sv.add_argument("--walltime-min", type=float, default=2000.0, help="static/keep: job walltime (default 2000)")
    sv.add_argument("--job-cap", type=_positive_int, default=24, help="dynamic: running job cap (default 24)")
    sv.add_argument("--max-walltime-min", type=float, default=240.0, help="dynamic: max walltime (default 240)")
    sv.add_argument("--retry-budget", type=int, default=3, help="consecutive adapter failures tolerated (default 3)")
    sv.add_argument("--horizon-s", type=float, default=3600.0, help="process/template: run this long (default 3600)")
    sv.add_argument("--scenario", default="center", help="sim: scenario (default center)")
    sv.add_argument("--seed", type=int, default=None, help="sim: random seed")
    sv.add_argument("--horizon-min", type=int, default=None, help="sim: simulated minutes")
    sv.add_argument("--server", default=None, metavar="HOST:PORT", help="process: farm server for clients")
    sv.add_argument("--budget", type=int, default=4, help="process: local slot budget (default 4)")
    sv.add_argument("--heartbeat-ms", type=_positive_int, default=500, help="process: client heartbeat interval")
    sv.add_argument("--max-missed", type=_positive_int, default=4, help="process: client missed-ack limit")
    sv.add_argument("--submit-cmd", default=None, help="template: submit command with {size} and {walltime}")
    sv.add_argument("--cancel-cmd", default=None, help="template: cancel command with {job_id}")
    sv.add_argument("--query-cmd", default=None, help="template: command printing scheduler state as JSON")
    sv.set_defaults(func=cmd_supervise)

    d = sub.add_parser("demo", help="live run: EA server plus supervised local clients")
    d.add_argument("--out-dir", default="demo_out", help="output directory (default demo_out)")
    d.add_argument("--duration-s", type=float, default=180.0, help="run length (default 180)")
    d.add_argument("--budget-script", default="0:8,60:0,90:8",
                   help="slot budget as seconds:slots steps (default 0:8,60:0,90:8)")
    d.add_argument("--interval-s", type=float, default=1.0, help="supervisor tick (default 1)")
    d.add_argument("--seed", type=int, default=0, help="EA seed (default 0)")
    d.add_argument("--pool", type=int, default=20, help="EA pool capacity (default 20)")
    d.add_argument("--heartbeat-ms", type=_positive_int, default=500, help="client heartbeat interval")
    d.add_argument("--max-missed", type=_positive_int, default=4, help="client missed-ack limit")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose, getattr(args, "log_file", None))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"farm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback
        from farm.sim.background import ConfigError
        from farm.sim.trace import ParseError
        if not isinstance(exc, (ConfigError, ParseError, OSError, ValueError)):
            raise
        print(f"farm: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
