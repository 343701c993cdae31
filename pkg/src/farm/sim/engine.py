"""Discrete-event batch scheduler with preemptible fill-in jobs.

Normal jobs are dispatched first-come-first-served and see cores held by
fill-in jobs as free: fill-ins are preempted to make room. Fill-in jobs
then go first-fit into whatever is genuinely free. Neither class may start
if its walltime would collide with a reservation.

With ``dispatch_delay > 0`` the scheduler only acts on a fixed cycle
(multiples of the delay), which models a slow scheduling loop without
letting fill-in activity change when normal jobs start.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

from farm.sim.model import ClusterSpec, JobClass, JobSpec, LoadSample
from farm.supervisor.policies import RunningJob, SchedState

log = logging.getLogger("farm.sim")

# Same-time event order.
END, RES_END, RES_START, SUBMIT = range(4)

FILLIN_ID_BASE = 1_000_000_000


@dataclass
class Allocation:
    job: JobSpec
    start: float
    end: float
    epoch: int


@dataclass
class SimEvent:
    t: float
    kind: str
    job_id: int
    job_class: str
    size: int

    def log_line(self) -> str:
        return f"t={self.t:g} event={self.kind} job_id={self.job_id} class={self.job_class} size={self.size}"


@dataclass
class SimState:
    clock: float = 0.0
    running: dict[int, Allocation] = field(default_factory=dict)
    waiting_normal: deque = field(default_factory=deque)
    waiting_fillin: list[JobSpec] = field(default_factory=list)
    trace: list[LoadSample] = field(default_factory=list)


class Simulator:
    def __init__(self, cluster: ClusterSpec, jobs: list[JobSpec] = (), dispatch_delay: float = 0,
                 fillin_job_cap: int | None = None, requeue_fillin: bool = False,
                 sample_period: float = 60):
        self.cluster = cluster
        self.total = cluster.total_units
        self.dispatch_delay = dispatch_delay
        self.fillin_job_cap = fillin_job_cap
        self.requeue_fillin = requeue_fillin
        self.sample_period = sample_period
        self.state = SimState()
        self.events: list = []
        self._seq = itertools.count()
        self._epochs = itertools.count(1)
        self._fillin_ids = itertools.count(FILLIN_ID_BASE + 1)
        self.jobs: dict[int, JobSpec] = {}
        self.normal_starts: list[tuple[int, float]] = []
        self.event_log: list[SimEvent] = []
        self.max_running_fillin = 0
        self.queued_samples: list[tuple[int, Counter]] = []
        self.on_tick: Callable[[float], object] | None = None
        self.tick_interval: float | None = None
        self._next_cycle = 0.0
        for job in sorted(jobs, key=lambda j: (j.submit_time, j.job_id)):
            if job.job_class is not JobClass.NORMAL:
                raise ValueError("pre-loaded jobs must be normal jobs; fill-ins come via submit_fillin")
            if job.cores > self.total:
                raise ValueError(f"job {job.job_id} needs {job.cores} units, machine has {self.total}")
            self.jobs[job.job_id] = job
            self._push(job.submit_time, SUBMIT, job.job_id, job)
        for r in cluster.reservations:
            self._push(r.start, RES_START, 0, r)
            self._push(r.end, RES_END, 0, r)

    # -- bookkeeping ----------------------------------------------------

    def _push(self, t, prio, job_id, payload):
        heapq.heappush(self.events, (t, prio, job_id, next(self._seq), payload))

    def _log(self, kind: str, job: JobSpec):
        self.event_log.append(SimEvent(self.state.clock, kind, job.job_id, job.job_class.value, job.cores))

    def _units(self, cls: JobClass) -> int:
        return sum(a.job.cores for a in self.state.running.values() if a.job.job_class is cls)

    def reserved_units(self, t: float, kind: str | None = None) -> int:
        return sum(self.cluster.reservation_units(r) for r in self.cluster.reservations
                   if r.active(t) and (kind is None or r.kind == kind))

    def free_units(self) -> int:
        used = sum(a.job.cores for a in self.state.running.values())
        return self.total - used - self.reserved_units(self.state.clock)

    def running_fillin(self) -> list[Allocation]:
        return [a for a in self.state.running.values() if a.job.job_class is JobClass.FILLIN]

    def next_reservation(self) -> float | None:
        starts = [r.start for r in self.cluster.reservations if r.start > self.state.clock]
        return min(starts) if starts else None

    # -- admission and dispatch ----------------------------------------

    def admissible(self, job: JobSpec, t: float, count_fillin: bool) -> bool:
        """Would ``job`` fit now and at every reservation start inside its walltime?"""
        end = t + job.walltime
        points = [t] + sorted({r.start for r in self.cluster.reservations if t < r.start < end})
        for s in points:
            used = self.reserved_units(s)
            for a in self.state.running.values():
                if a.end > s and (count_fillin or a.job.job_class is JobClass.NORMAL):
                    used += a.job.cores
            if used + job.cores > self.total:
                return False
        return True

    def _start(self, job: JobSpec) -> None:
        t = self.state.clock
        alloc = Allocation(job, t, t + job.walltime, next(self._epochs))
        self.state.running[job.job_id] = alloc
        self._push(alloc.end, END, job.job_id, alloc.epoch)
        if job.job_class is JobClass.NORMAL:
            self.normal_starts.append((job.job_id, t))
        else:
            self.max_running_fillin = max(self.max_running_fillin, len(self.running_fillin()))
        self._log("start", job)

    def _preempt(self, alloc: Allocation) -> None:
        del self.state.running[alloc.job.job_id]
        self._log("preempt", alloc.job)
        if alloc.job.requeue_on_preempt:
            self.state.waiting_fillin.append(alloc.job)
            self._log("requeue", alloc.job)

    def _preempt_for(self, need: int) -> None:
        """Free at least ``need`` units: largest fill-ins first, latest start breaking ties."""
        victims = sorted(self.running_fillin(), key=lambda a: (-a.job.cores, -a.start, -a.job.job_id))
        freed = 0
        for alloc in victims:
            if freed >= need:
                break
            self._preempt(alloc)
            freed += alloc.job.cores

    def dispatch(self) -> None:
        st = self.state
        t = st.clock
        while st.waiting_normal:
            job = st.waiting_normal[0]
            if not self.admissible(job, t, count_fillin=False):
                break
            need = job.cores - self.free_units()
            if need > 0:
                self._preempt_for(need)
            st.waiting_normal.popleft()
            self._start(job)
        if not st.waiting_fillin:
            return
        keep = []
        n_running = len(self.running_fillin())
        free = self.free_units()
        for job in st.waiting_fillin:
            capped = self.fillin_job_cap is not None and n_running >= self.fillin_job_cap
            if not capped and job.cores <= free and self.admissible(job, t, count_fillin=True):
                self._start(job)
                n_running += 1
                free -= job.cores
            else:
                keep.append(job)
        st.waiting_fillin = keep

    # -- fill-in interface (used by the supervisor adapter) -------------

    def submit_fillin(self, size: int, walltime: float) -> int:
        if size > self.total:
            raise ValueError(f"fill-in of {size} units exceeds machine size {self.total}")
        job = JobSpec(next(self._fillin_ids), size, walltime, self.state.clock,
                      JobClass.FILLIN, self.requeue_fillin)
        self.jobs[job.job_id] = job
        self.state.waiting_fillin.append(job)
        self._log("submit", job)
        return job.job_id

    def cancel_fillin(self, job_id: int) -> None:
        st = self.state
        alloc = st.running.get(job_id)
        if alloc is not None:
            if alloc.job.job_class is not JobClass.FILLIN:
                raise ValueError(f"job {job_id} is not a fill-in job")
            del st.running[job_id]
            self._log("cancel", alloc.job)
            return
        for i, job in enumerate(st.waiting_fillin):
            if job.job_id == job_id:
                del st.waiting_fillin[i]
                self._log("cancel", job)
                return
        raise KeyError(job_id)

    def sched_state(self) -> SchedState:
        queued = Counter(j.cores for j in self.state.waiting_fillin)
        running = [RunningJob(a.job.job_id, a.job.cores, a.start) for a in self.running_fillin()]
        waiting = [RunningJob(j.job_id, j.cores, j.submit_time) for j in self.state.waiting_fillin]
        return SchedState(self.free_units(), dict(queued), running, self.next_reservation(), waiting)

    # -- event loop ----------------------------------------------------

    def _handle(self, prio, job_id, payload) -> None:
        st = self.state
        if prio == END:
            alloc = st.running.get(job_id)
            if alloc is None or alloc.epoch != payload:
                return  # preempted or cancelled earlier
            del st.running[job_id]
            self._log("end", alloc.job)
        elif prio == SUBMIT:
            st.waiting_normal.append(payload)
            self._log("submit", payload)
        elif prio == RES_START:
            overflow = -self.free_units()
            if overflow > 0:
                self._preempt_for(overflow)
            if self.free_units() < 0:
                log.warning("event=reservation_conflict t=%g", st.clock)
        # RES_END needs no action beyond triggering a dispatch.

    def _sample(self) -> None:
        t = self.state.clock
        uc = self.cluster.unit_cores
        normal = self._units(JobClass.NORMAL) + self.reserved_units(t, "job")
        fillin = self._units(JobClass.FILLIN)
        cap = self.total - self.reserved_units(t, "mask")
        self.state.trace.append(LoadSample(int(t // 60), normal * uc, fillin * uc, cap * uc))
        self.queued_samples.append((int(t // 60), Counter(j.cores for j in self.state.waiting_fillin)))

    def step(self, horizon: float, next_sample: float, next_tick: float | None) -> tuple[float, bool, bool]:
        """Advance to the next time point below ``horizon`` and process it."""
        cands = [horizon, next_sample]
        if self.events:
            cands.append(self.events[0][0])
        if next_tick is not None:
            cands.append(next_tick)
        if self.dispatch_delay > 0:
            cands.append(self._next_cycle)
        t = min(cands)
        if t >= horizon:
            return horizon, False, False
        self.state.clock = t
        while self.events and self.events[0][0] == t:
            _, prio, job_id, _, payload = heapq.heappop(self.events)
            self._handle(prio, job_id, payload)
        if self.dispatch_delay <= 0:
            self.dispatch()
        elif t == self._next_cycle:
            self.dispatch()
            self._next_cycle += self.dispatch_delay
        ticked = next_tick is not None and t == next_tick
        if ticked and self.on_tick is not None:
            self.on_tick(t)
            if self.dispatch_delay <= 0:
                self.dispatch()
        sampled = t == next_sample
        if sampled:
            self._sample()
        return t, ticked, sampled

    def run(self, horizon: float) -> list[LoadSample]:
        next_sample = 0.0
        next_tick = 0.0 if self.on_tick is not None else None
        while True:
            t, ticked, sampled = self.step(horizon, next_sample, next_tick)
            if t >= horizon:
                break
            if ticked:
                next_tick = t + self.tick_interval
            if sampled:
                next_sample = t + self.sample_period
        return self.state.trace


class SimAdapter:
    """Scheduler adapter backed by an in-process :class:`Simulator`."""

    def __init__(self, sim: Simulator):
        self.sim = sim

    def query_state(self) -> SchedState:
        return self.sim.sched_state()

    def submit(self, size: int, walltime: float) -> int:
        return self.sim.submit_fillin(size, walltime)

    def cancel(self, job_id: int) -> None:
        self.sim.cancel_fillin(job_id)
