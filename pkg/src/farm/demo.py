"""Live end-to-end run on the local host.

An EA server for LJ13 runs in this process. A supervisor keeps fill-in
clients supplied through a :class:`ProcessAdapter` while a budget script
grows and shrinks the number of slots, so clients are started and killed
while the optimisation continues.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from farm.ea.workload import EaWorkload, read_pool_index
from farm.server import FarmServer, LossPolicy, ServerConfig, ServerHost
from farm.supervisor.adapters import ProcessAdapter, client_command
from farm.supervisor.policies import StaticMix
from farm.supervisor.runner import run_supervisor

log = logging.getLogger("farm.demo")


def parse_budget_script(text: str) -> list[tuple[float, int]]:
    """``"0:8, 60:0, 90:8"`` -> ``[(0.0, 8), (60.0, 0), (90.0, 8)]`` (seconds, slots)."""
    steps = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            t, b = item.split(":")
            steps.append((float(t), int(b)))
        except ValueError:
            raise ValueError(f"expected seconds:slots, got {item!r}") from None
    if not steps or steps[0][0] != 0:
        raise ValueError("budget script must start at 0")
    if any(b < 0 for _, b in steps) or any(t1 <= t0 for (t0, _), (t1, _) in zip(steps, steps[1:])):
        raise ValueError("budget script needs increasing times and non-negative slots")
    return steps


def budget_at(script: list[tuple[float, int]], t: float) -> int:
    current = script[0][1]
    for start, b in script:
        if t >= start:
            current = b
    return current


@dataclass
class DemoConfig:
    out_dir: Path
    duration_s: float = 180.0
    budget_script: list[tuple[float, int]] = field(default_factory=lambda: [(0, 8), (60, 0), (90, 8)])
    interval_s: float = 1.0
    seed: int = 0
    pool: int = 20
    n_atoms: int = 13
    lease_ms: int = 3000
    heartbeat_ms: int = 500
    max_missed: int = 4
    drain_s: float = 20.0
    dump_every_s: float = 10.0


@dataclass
class DemoReport:
    ok: bool
    problems: list[str]
    best_by_dump: list[float]
    clients_started: int
    preempted: int
    completed_tasks: int
    trace: Path


class _Recorder(ProcessAdapter):
    def __init__(self, *args, t0: float, server: FarmServer, **kw):
        super().__init__(*args, **kw)
        self.t0 = t0
        self.server = server
        self.rows: list[tuple] = []

    def poll(self) -> None:
        super().poll()
        running = sum(j.size for j in self.running.values() if not j.killed)
        queued = sum(j.size for j in self.queued)
        self.rows.append((round(self.clock() - self.t0, 1), self.budget, running, queued,
                          self.server.ledger.completed))


def self_shutdown_bound_s(cfg: DemoConfig) -> float:
    return 2 * (cfg.max_missed + 1) * cfg.heartbeat_ms / 1000.0


def run_demo(cfg: DemoConfig) -> DemoReport:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dumps = out / "pool"
    workload = EaWorkload(n_atoms=cfg.n_atoms, capacity=cfg.pool, tasks=10**9, seed=cfg.seed,
                          time_budget_s=max(1.0, cfg.duration_s - cfg.drain_s),
                          dump_dir=dumps, dump_every_s=cfg.dump_every_s)
    core = FarmServer(ServerConfig(lease_ms=cfg.lease_ms, chunk_max=2, loss_policy=LossPolicy.DROP),
                      workload)
    host = ServerHost(core, ("127.0.0.1", 0)).start()
    addr = "%s:%d" % host.address
    t0 = time.monotonic()
    adapter = _Recorder(client_command(addr, cfg.heartbeat_ms, cfg.max_missed),
                        lambda: budget_at(cfg.budget_script, time.monotonic() - t0),
                        t0=t0, server=core, stderr=open(out / "clients.log", "wb"))
    peak = max(b for _, b in cfg.budget_script)
    policy = StaticMix({1: peak}, walltime=cfg.duration_s * 2, maintain=True)
    problems: list[str] = []
    with open(out / "supervise.log", "w") as slog:
        run_supervisor(policy, adapter, cfg.interval_s, cfg.duration_s, out=slog)
    # Let the farm finish draining and the clients leave on their own.
    if not host.wait(timeout=cfg.drain_s + cfg.lease_ms / 1000.0):
        problems.append("server did not drain in time")
        host.stop()
    if not adapter.wait_all(self_shutdown_bound_s(cfg) + 2.0):
        orphans = [p.pid for p in adapter.live_processes()]
        problems.append(f"orphan clients: {orphans}")
        adapter.kill_all()
    adapter.stderr.close()

    trace = out / "demo_trace.csv"
    with open(trace, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t_s", "budget", "running_slots", "queued_slots", "completed_tasks"))
        w.writerows(adapter.rows)

    best = []
    for d in sorted(p for p in dumps.glob("dump*") if p.is_dir()):
        index = read_pool_index(d / "pool.tsv")
        if not index:
            problems.append(f"empty pool in {d.name}")
            continue
        best.append(index[0][1])
    if not best:
        problems.append("no pool dumps written")
    if any(b > a for a, b in zip(best, best[1:])):
        problems.append("best energy increased between dumps")
    report = DemoReport(not problems, problems, best, adapter.started_total, adapter.preempted,
                        core.ledger.completed, trace)
    log.info("event=demo_done ok=%s clients_started=%d preempted=%d completed=%d best=%s",
             report.ok, report.clients_started, report.preempted, report.completed_tasks,
             f"{best[-1]:.6f}" if best else "none")
    return report
