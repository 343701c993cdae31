from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple


class JobClass(enum.Enum):
    NORMAL = "normal"
    FILLIN = "fillin"


@dataclass
class JobSpec:
    """A batch job. ``cores`` is in allocation units; times are seconds."""

    job_id: int
    cores: int
    walltime: float
    submit_time: float
    job_class: JobClass = JobClass.NORMAL
    requeue_on_preempt: bool = False

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError(f"job {self.job_id}: cores must be >= 1")
        if self.walltime <= 0:
            raise ValueError(f"job {self.job_id}: walltime must be > 0")
        if self.requeue_on_preempt and self.job_class is not JobClass.FILLIN:
            raise ValueError("only fill-in jobs are preemptible")


@dataclass(frozen=True)
class Reservation:
    """Cores held from ``start`` to ``end``.

    ``kind="job"`` is a reserved job (counted as normal load);
    ``kind="mask"`` withdraws capacity (administrative hold).
    ``units=None`` means the whole machine.
    """

    start: float
    end: float
    units: int | None = None
    kind: str = "job"

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("reservation must end after it starts")
        if self.kind not in ("job", "mask"):
            raise ValueError(f"unknown reservation kind {self.kind!r}")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass
class ClusterSpec:
    nodes: list[tuple[int, int]]
    reservations: list[Reservation] = field(default_factory=list)
    node_granular: bool = False

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("cluster has no nodes")
        if self.node_granular and len({c for _, c in self.nodes}) != 1:
            raise ValueError("node-granular allocation needs uniform nodes")

    @property
    def capacity_cores(self) -> int:
        return sum(c for _, c in self.nodes)

    @property
    def total_units(self) -> int:
        return len(self.nodes) if self.node_granular else self.capacity_cores

    @property
    def unit_cores(self) -> int:
        return self.nodes[0][1] if self.node_granular else 1

    def reservation_units(self, r: Reservation) -> int:
        return self.total_units if r.units is None else r.units


class LoadSample(NamedTuple):
    t: int
    normal_cores: int
    fillin_cores: int
    capacity: int
