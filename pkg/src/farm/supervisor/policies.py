"""Fill-in supply policies.

``tick`` looks only at the policy, what the adapter reports right now, and
the time. It keeps no state between calls, so a supervisor can be
restarted at any moment.

Sizes are in the adapter's allocation unit (cores, or nodes on
node-granular machines).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Union


class AdapterUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class RunningJob:
    job_id: int
    size: int
    start: float = 0.0


@dataclass
class SchedState:
    free: int
    queued_fillin: dict[int, int] = field(default_factory=dict)
    running_fillin: list[RunningJob] = field(default_factory=list)
    next_reservation: float | None = None
    queued_jobs_list: list[RunningJob] = field(default_factory=list)

    @property
    def queued_units(self) -> int:
        return sum(size * count for size, count in self.queued_fillin.items())

    @property
    def queued_jobs(self) -> int:
        return sum(self.queued_fillin.values())


class SchedulerAdapter(Protocol):
    def query_state(self) -> SchedState: ...

    def submit(self, size: int, walltime: float) -> int: ...

    def cancel(self, job_id: int) -> None: ...


@dataclass(frozen=True)
class StaticMix:
    counts: dict[int, int]
    walltime: float = 2000 * 60
    maintain: bool = False


@dataclass(frozen=True)
class KeepQueued:
    min_queued: dict[int, int]
    walltime: float = 2000 * 60


@dataclass(frozen=True)
class DynamicFit:
    interval: float = 60.0
    job_cap: int = 24
    max_walltime: float = 240 * 60

    def __post_init__(self):
        if self.job_cap < 1:
            raise ValueError("job_cap must be >= 1")


SupplyPolicy = Union[StaticMix, KeepQueued, DynamicFit]


@dataclass(frozen=True)
class Action:
    t: float
    kind: str  # "submit" | "cancel"
    size: int
    job_id: int
    reason: str
    walltime: float = 0.0

    def log_line(self) -> str:
        line = f"t={self.t:g} action={self.kind} job_id={self.job_id} size={self.size} reason={self.reason}"
        if self.kind == "submit":
            line += f" walltime={self.walltime:g}"
        return line


def _check_sizes(sizes) -> None:
    if any(s < 1 for s in sizes):
        raise ValueError("job sizes must be >= 1")


def tick(policy: SupplyPolicy, adapter: SchedulerAdapter, now: float) -> list[Action]:
    """Apply one round of ``policy``; returns the submits/cancels performed.

    Raises :class:`AdapterUnavailable` untouched so the caller can retry later.
    """
    actions: list[Action] = []

    def submit(size, walltime, reason):
        job_id = adapter.submit(size, walltime)
        actions.append(Action(now, "submit", size, job_id, reason, walltime))

    if isinstance(policy, StaticMix):
        _check_sizes(policy.counts)
        if policy.maintain:
            st = adapter.query_state()
            running: dict[int, int] = {}
            for job in st.running_fillin:
                running[job.size] = running.get(job.size, 0) + 1
            for size, want in sorted(policy.counts.items()):
                have = running.get(size, 0) + st.queued_fillin.get(size, 0)
                for _ in range(want - have):
                    submit(size, policy.walltime, "static_mix")
        elif now == 0:
            for size, count in sorted(policy.counts.items()):
                for _ in range(count):
                    submit(size, policy.walltime, "static_mix")
        return actions

    st = adapter.query_state()

    if isinstance(policy, KeepQueued):
        _check_sizes(policy.min_queued)
        for size, want in sorted(policy.min_queued.items()):
            for _ in range(want - st.queued_fillin.get(size, 0)):
                submit(size, policy.walltime, "keep_queued")
        return actions

    if isinstance(policy, DynamicFit):
        # Queued jobs sized for an earlier gap that has since closed never start.
        # Adapters that cannot list queued jobs individually skip this step.
        queued_units = 0 if st.queued_jobs_list else st.queued_units
        n_queued = 0 if st.queued_jobs_list else st.queued_jobs
        for job in sorted(st.queued_jobs_list, key=lambda j: j.job_id):
            if job.size > st.free:
                adapter.cancel(job.job_id)
                actions.append(Action(now, "cancel", job.size, job.job_id, "stale_fit"))
            else:
                queued_units += job.size
                n_queued += 1
        free = st.free - queued_units
        if free <= 0:
            return actions
        walltime = policy.max_walltime
        if st.next_reservation is not None:
            walltime = min(walltime, st.next_reservation - now - policy.interval)
        if walltime <= 0:
            return actions
        active = len(st.running_fillin) + n_queued
        if active < policy.job_cap:
            submit(free, walltime, "fit_free")
        elif st.running_fillin:
            smallest = min(st.running_fillin, key=lambda j: (j.size, -j.start, -j.job_id))
            adapter.cancel(smallest.job_id)
            actions.append(Action(now, "cancel", smallest.size, smallest.job_id, "merge_smallest"))
            submit(smallest.size + free, walltime, "merge_smallest")
        return actions

    raise TypeError(f"unknown policy {policy!r}")
