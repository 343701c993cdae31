"""Scheduler adapters for live runs.

``ProcessAdapter`` is a tiny local batch system: submitted jobs wait in a
FIFO queue and start as ``farm client`` processes when the slot budget
allows; when the budget shrinks, the most recently started jobs are
killed. ``TemplateAdapter`` drives a real batch system through three shell
command templates.
"""
from __future__ import annotations

import itertools
import json
import logging
import shlex
import signal
import subprocess
import sys
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable

from farm.supervisor.policies import AdapterUnavailable, RunningJob, SchedState

log = logging.getLogger("farm.supervisor")


def client_command(server: str, heartbeat_ms: int = 500, max_missed: int = 4) -> Callable[[int], list[str]]:
    def build(size: int) -> list[str]:
        return [sys.executable, "-m", "farm", "client", "--server", server, "--slots", str(size),
                "--heartbeat-ms", str(heartbeat_ms), "--max-missed", str(max_missed)]
    return build


@dataclass
class LocalJob:
    job_id: int
    size: int
    walltime: float
    submitted: float
    started: float | None = None
    proc: subprocess.Popen | None = None
    returncode: int | None = None
    killed: bool = False


class ProcessAdapter:
    """Runs fill-in jobs as local processes under a varying slot budget.

    ``budget`` is an int or a callable returning the current number of
    slots. All mutation happens in :meth:`poll`, :meth:`submit` and
    :meth:`cancel`, which the supervisor calls from its single loop.
    """

    def __init__(self, command: Callable[[int], list[str]], budget: int | Callable[[], int],
                 clock: Callable[[], float] = time.monotonic, stderr=subprocess.DEVNULL):
        self.command = command
        self._budget = budget if callable(budget) else (lambda: budget)
        self.clock = clock
        self.stderr = stderr
        self._ids = itertools.count(1)
        self.queued: list[LocalJob] = []
        self.running: dict[int, LocalJob] = {}
        self.done: list[LocalJob] = []
        self.finished = False
        self.preempted = 0
        self.started_total = 0

    @property
    def budget(self) -> int:
        return max(0, int(self._budget()))

    def used(self) -> int:
        return sum(j.size for j in self.running.values())

    def _kill(self, job: LocalJob, reason: str) -> None:
        # The job stays in ``running`` until its process is gone.
        job.killed = True
        if job.proc is not None and job.proc.poll() is None:
            job.proc.send_signal(signal.SIGTERM)
        log.info("event=kill job_id=%d size=%d reason=%s", job.job_id, job.size, reason)

    def _reap(self) -> None:
        for job_id, job in list(self.running.items()):
            rc = job.proc.poll()
            if rc is None:
                continue
            job.returncode = rc
            del self.running[job_id]
            self.done.append(job)
            if rc == 0:
                self.finished = True
            log.info("event=exit job_id=%d returncode=%d", job_id, rc)

    def poll(self) -> None:
        """Reap exits, enforce walltimes and the budget, then start queued jobs."""
        self._reap()
        now = self.clock()
        for job in list(self.running.values()):
            if not job.killed and now - job.started >= job.walltime:
                self._kill(job, "walltime")
        budget = self.budget
        victims = sorted((j for j in self.running.values() if not j.killed),
                         key=lambda j: (-j.started, -j.job_id))
        used = self.used()
        for job in victims:
            if used <= budget:
                break
            self._kill(job, "preempt")
            self.preempted += 1
            used -= job.size
        keep = []
        for job in self.queued:
            if job.size <= budget - used:
                job.started = now
                job.proc = subprocess.Popen(self.command(job.size), stdout=subprocess.DEVNULL,
                                            stderr=self.stderr)
                self.running[job.job_id] = job
                self.started_total += 1
                used += job.size
                log.info("event=start job_id=%d size=%d pid=%d", job.job_id, job.size, job.proc.pid)
            else:
                keep.append(job)
        self.queued = keep

    def query_state(self) -> SchedState:
        queued = Counter(j.size for j in self.queued)
        running = [RunningJob(j.job_id, j.size, j.started) for j in self.running.values() if not j.killed]
        waiting = [RunningJob(j.job_id, j.size, j.submitted) for j in self.queued]
        return SchedState(self.budget - self.used(), dict(queued), running, None, waiting)

    def submit(self, size: int, walltime: float) -> int:
        job = LocalJob(next(self._ids), size, walltime, self.clock())
        self.queued.append(job)
        return job.job_id

    def cancel(self, job_id: int) -> None:
        if job_id in self.running:
            self._kill(self.running[job_id], "cancel")
            return
        for i, job in enumerate(self.queued):
            if job.job_id == job_id:
                del self.queued[i]
                return
        raise KeyError(job_id)

    def live_processes(self) -> list[subprocess.Popen]:
        return [j.proc for j in self.running.values() if j.proc.poll() is None]

    def wait_all(self, timeout: float) -> bool:
        """Wait until every started process has exited; True if none is left."""
        deadline = time.monotonic() + timeout
        while True:
            self._reap()
            if not self.running:
                return True
            if time.monotonic() >= deadline:
                return False
            time.sleep(0.05)

    def kill_all(self) -> None:
        self.queued.clear()
        for job in self.running.values():
            if job.proc.poll() is None:
                job.proc.kill()
        for job in self.running.values():
            job.proc.wait()
        self._reap()


class TemplateAdapter:
    """Shell-command adapter for an external batch system.

    ``submit`` is formatted with ``{size}`` and ``{walltime}`` (seconds) and
    must print the new job id. ``cancel`` receives ``{job_id}``. ``query``
    must print JSON such as
    ``{"free": 12, "queued": [[1, 3], [4, 1]], "running": [[17, 4]], "next_reservation": null}``.
    Any failing or timed-out command raises :class:`AdapterUnavailable`.
    """

    def __init__(self, submit: str, cancel: str, query: str, timeout_s: float = 30.0):
        self.templates = {"submit": submit, "cancel": cancel, "query": query}
        self.timeout_s = timeout_s

    def _run(self, which: str, **fields) -> str:
        cmd = self.templates[which].format(**fields)
        try:
            res = subprocess.run(shlex.split(cmd), capture_output=True, text=True, timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise AdapterUnavailable(f"{which}: {exc}") from None
        if res.returncode != 0:
            raise AdapterUnavailable(f"{which} exited {res.returncode}: {res.stderr.strip()[:200]}")
        return res.stdout

    def query_state(self) -> SchedState:
        try:
            data = json.loads(self._run("query"))
            queued = {int(size): int(count) for size, count in data.get("queued", [])}
            running = [RunningJob(int(jid), int(size)) for jid, size in data.get("running", [])]
            nxt = data.get("next_reservation")
            return SchedState(int(data["free"]), queued, running, None if nxt is None else float(nxt))
        except (ValueError, KeyError, TypeError) as exc:
            raise AdapterUnavailable(f"query: unreadable output ({exc})") from None

    def submit(self, size: int, walltime: float) -> int:
        out = self._run("submit", size=size, walltime=int(walltime))
        try:
            return int(out.split()[-1])
        except (ValueError, IndexError):
            raise AdapterUnavailable(f"submit: no job id in {out!r}") from None

    def cancel(self, job_id: int) -> None:
        self._run("cancel", job_id=job_id)
