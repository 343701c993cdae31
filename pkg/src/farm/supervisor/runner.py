"""The supervision control loop."""
from __future__ import annotations

import logging
import threading
import time
from typing import Callable, TextIO

from farm.supervisor.policies import AdapterUnavailable, SchedulerAdapter, SupplyPolicy, tick

log = logging.getLogger("farm.supervisor")


def run_supervisor(policy: SupplyPolicy, adapter: SchedulerAdapter, interval: float, horizon: float,
                   stop: threading.Event | None = None, retry_budget: int = 3,
                   out: TextIO | None = None, clock: Callable[[], float] = time.monotonic) -> list[str]:
    """Call :func:`tick` every ``interval`` seconds for ``horizon`` seconds.

    Returns the supervision log, one ``key=value`` line per action. The loop
    ends early when ``stop`` is set, when the adapter reports ``finished``
    (its jobs have started exiting on their own) or after ``retry_budget``
    consecutive :class:`AdapterUnavailable` failures.
    """
    lines: list[str] = []

    def emit(line: str) -> None:
        lines.append(line)
        if out is not None:
            out.write(line + "\n")
            out.flush()

    if horizon <= 0:
        return lines
    stop = stop or threading.Event()
    t0 = clock()
    failures = 0
    k = 0
    while not stop.is_set():
        now = k * interval
        if now >= horizon:
            break
        poll = getattr(adapter, "poll", None)
        try:
            if poll is not None:
                poll()
            if getattr(adapter, "finished", False):
                emit(f"t={now:g} event=stop reason=workload_finished")
                break
            actions = tick(policy, adapter, now)
            failures = 0
        except AdapterUnavailable as exc:
            failures += 1
            emit(f"t={now:g} event=adapter_unavailable attempt={failures} error={str(exc).replace(' ', '_')}")
            if failures > retry_budget:
                emit(f"t={now:g} event=stop reason=adapter_failed")
                break
            actions = []
        for a in actions:
            emit(a.log_line())
        k += 1
        delay = t0 + k * interval - clock()
        if delay > 0 and stop.wait(delay):
            break
    return lines
