"""Workloads the server farms out, and their client-side compute functions.

A workload is the server's task source and result sink. The server itself
never looks inside task or result payloads.
"""
from __future__ import annotations

import hashlib
import struct
import time
from collections import Counter

POISONED = b""
"""Result marker for a task whose payload could not be processed."""

# First payload byte selects the compute kernel on the client.
KIND_EA = 0x01
KIND_TASKFARM = 0x80

_FARM_TASK = struct.Struct(">BQI")
_FARM_RESULT = struct.Struct(">BQ32s")


class Workload:
    """Base class; subclasses override what they need."""

    name = "base"

    def initial_tasks(self) -> list[bytes]:
        return []

    def next_tasks(self, n: int) -> list[bytes]:
        """Generate up to ``n`` fresh tasks from the remaining budget."""
        return []

    def exhausted(self) -> bool:
        return True

    def absorb(self, tasks: list[bytes], results: list[bytes]) -> None:
        pass

    def summary(self) -> dict:
        return {}

    def close(self) -> None:
        """Called once when the server stops."""


class TaskFarmWorkload(Workload):
    """A fixed set of independent tasks, each sleeping ``work_ms`` then hashing its index."""

    name = "taskfarm"

    def __init__(self, total_tasks: int, work_ms: int = 0):
        if total_tasks < 0:
            raise ValueError("total_tasks must be >= 0")
        self.total_tasks = total_tasks
        self.work_ms = work_ms
        self.seen: Counter[int] = Counter()
        self.poisoned = 0

    def initial_tasks(self) -> list[bytes]:
        return [_FARM_TASK.pack(KIND_TASKFARM, i, self.work_ms) for i in range(self.total_tasks)]

    def absorb(self, tasks, results):
        for res in results:
            if res == POISONED:
                self.poisoned += 1
                continue
            _, index, digest = _FARM_RESULT.unpack(res)
            if digest != _digest(index):
                raise ValueError(f"bad result digest for task {index}")
            self.seen[index] += 1

    @property
    def duplicates(self) -> int:
        return sum(c - 1 for c in self.seen.values() if c > 1)

    def summary(self):
        return {"distinct": len(self.seen), "duplicates": self.duplicates, "poisoned": self.poisoned}


def _digest(index: int) -> bytes:
    return hashlib.sha256(index.to_bytes(8, "big")).digest()


def taskfarm_compute(payload: bytes) -> bytes:
    _, index, work_ms = _FARM_TASK.unpack(payload)
    if work_ms:
        time.sleep(work_ms / 1000.0)
    return _FARM_RESULT.pack(KIND_TASKFARM, index, _digest(index))


def compute_task(payload: bytes) -> bytes:
    """Run one task payload; raises on anything it cannot parse."""
    if not payload:
        raise ValueError("empty task payload")
    kind = payload[0]
    if kind == KIND_TASKFARM:
        return taskfarm_compute(payload)
    if kind == KIND_EA:
        from farm.ea.workload import ea_compute
        return ea_compute(payload)
    raise ValueError(f"unknown task kind 0x{kind:02X}")
