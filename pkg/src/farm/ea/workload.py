"""EA task/result payloads and the server-side EA workload.

Candidate record: ``[N u32][3N x f64][energy f64][seed u64]``, big-endian.
Task payload: ``[version u8][n_children u32][task seed u64][p_mut f64]
[sigma f64][max_iter u32][g_tol f64]`` followed by two candidate records.
Result payload: ``[version u8][count u32]`` followed by ``count`` records.
"""
from __future__ import annotations

import logging
import struct
import time
from pathlib import Path

import numpy as np

from farm.ea.evolve import (Candidate, EaSettings, EaTask, Pool, SEED_LIMIT, make_children,
                            next_task, seed_pool)
from farm.workloads import KIND_EA, POISONED, Workload

log = logging.getLogger("farm.ea")

PAYLOAD_VERSION = KIND_EA
_TASK_HEAD = struct.Struct(">BIQddId")
_RESULT_HEAD = struct.Struct(">BI")
_U32 = struct.Struct(">I")
_TAIL = struct.Struct(">dQ")


def _pack_candidate(c: Candidate) -> bytes:
    n = len(c.coords)
    return (_U32.pack(n) + np.asarray(c.coords, dtype=">f8").tobytes()
            + _TAIL.pack(c.energy, c.seed))


def _unpack_candidate(buf: bytes, off: int) -> tuple[Candidate, int]:
    (n,) = _U32.unpack_from(buf, off)
    off += 4
    nbytes = 24 * n
    if len(buf) < off + nbytes + _TAIL.size:
        raise ValueError("truncated candidate record")
    coords = np.frombuffer(buf, dtype=">f8", count=3 * n, offset=off).astype(np.float64).reshape(n, 3)
    off += nbytes
    energy, seed = _TAIL.unpack_from(buf, off)
    return Candidate(coords, energy, seed=seed), off + _TAIL.size


def encode_task(task: EaTask) -> bytes:
    st = task.settings
    head = _TASK_HEAD.pack(PAYLOAD_VERSION, task.n_children, task.seed,
                           st.p_mut, st.sigma_mut, st.max_iter, st.g_tol)
    return head + _pack_candidate(task.parent_a) + _pack_candidate(task.parent_b)


def decode_task(buf: bytes) -> EaTask:
    version, n_children, seed, p_mut, sigma, max_iter, g_tol = _TASK_HEAD.unpack_from(buf, 0)
    if version != PAYLOAD_VERSION:
        raise ValueError(f"unsupported EA payload version {version}")
    a, off = _unpack_candidate(buf, _TASK_HEAD.size)
    b, off = _unpack_candidate(buf, off)
    if off != len(buf):
        raise ValueError("trailing bytes in EA task")
    return EaTask(a, b, n_children, seed, EaSettings(p_mut, sigma, max_iter, g_tol))


def encode_result(children: list[Candidate]) -> bytes:
    return _RESULT_HEAD.pack(PAYLOAD_VERSION, len(children)) + b"".join(map(_pack_candidate, children))


def decode_result(buf: bytes) -> list[Candidate]:
    version, count = _RESULT_HEAD.unpack_from(buf, 0)
    if version != PAYLOAD_VERSION:
        raise ValueError(f"unsupported EA payload version {version}")
    off = _RESULT_HEAD.size
    out = []
    for _ in range(count):
        c, off = _unpack_candidate(buf, off)
        out.append(c)
    if off != len(buf):
        raise ValueError("trailing bytes in EA result")
    return out


def ea_compute(payload: bytes) -> bytes:
    return encode_result(make_children(decode_task(payload)))


def dump_pool(pool: Pool, directory: str | Path) -> Path:
    """Write one XYZ file per member plus ``pool.tsv`` (rank, energy, id)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = ["rank\tenergy\tid"]
    for rank, c in enumerate(pool.members, start=1):
        lines = [str(c.n_atoms), f"energy={c.energy:.12f} id={c.id} seed={c.seed}"]
        lines += [f"X {x:.10f} {y:.10f} {z:.10f}" for x, y, z in c.coords]
        (d / f"rank{rank:03d}.xyz").write_text("\n".join(lines) + "\n")
        rows.append(f"{rank}\t{c.energy:.12f}\t{c.id}")
    (d / "pool.tsv").write_text("\n".join(rows) + "\n")
    return d


def read_pool_index(path: str | Path) -> list[tuple[int, float, int]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        rank, energy, cid = row.split("\t")
        out.append((int(rank), float(energy), int(cid)))
    return out


class EaWorkload(Workload):
    """Server-side pool: generates parent pairs on demand and merges returned children.

    The budget is a number of tasks; ``time_budget_s`` additionally stops task
    generation after that many seconds of wall time.
    """

    name = "ea"

    def __init__(self, n_atoms: int = 13, capacity: int = 20, tasks: int = 1000,
                 n_children: int = 1, seed: int = 0, diversity_epsilon: float = 1e-3,
                 settings: EaSettings | None = None, time_budget_s: float | None = None,
                 dump_dir: str | Path | None = None, dump_every_s: float | None = None,
                 clock=time.monotonic):
        self.settings = settings or EaSettings()
        self.n_children = n_children
        self.task_budget = tasks
        self.generated = 0
        self.evaluations = 0
        self.merged_results = 0
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.pool = Pool(capacity, diversity_epsilon)
        self.evaluations += seed_pool(self.pool, n_atoms, self.rng, capacity, self.settings)
        self.best_history = [self.pool.best.energy]
        self._clock = clock
        self._t0 = clock()
        self.time_budget_s = time_budget_s
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.dump_every_s = dump_every_s
        self._dumps = 0
        self._last_dump = self._t0
        if self.dump_dir:
            self.dump()

    def exhausted(self) -> bool:
        if self.generated >= self.task_budget:
            return True
        return self.time_budget_s is not None and self._clock() - self._t0 >= self.time_budget_s

    def next_tasks(self, n):
        out = []
        while len(out) < n and not self.exhausted():
            seed = (self.seed * 1_000_003 + self.generated + 1) % SEED_LIMIT
            task = next_task(self.pool, self.rng, self.n_children, seed=seed, settings=self.settings)
            out.append(encode_task(task))
            self.generated += 1
        return out

    def absorb(self, tasks, results):
        for res in results:
            if res == POISONED:
                continue
            try:
                children = decode_result(res)
            except (ValueError, struct.error):
                log.warning("event=bad_result bytes=%d", len(res))
                continue
            self.evaluations += len(children)
            for child in children:
                self.pool.merge(child)
            self.merged_results += 1
        self.best_history.append(self.pool.best.energy)
        if self.dump_dir and self.dump_every_s and self._clock() - self._last_dump >= self.dump_every_s:
            self.dump()

    def dump(self) -> Path:
        self._dumps += 1
        self._last_dump = self._clock()
        path = dump_pool(self.pool, self.dump_dir / f"dump{self._dumps:04d}")
        dump_pool(self.pool, self.dump_dir / "final")
        log.info("event=pool_dump path=%s best=%.6f evaluations=%d", path, self.pool.best.energy,
                 self.evaluations)
        return path

    def close(self):
        if self.dump_dir:
            self.dump()

    def summary(self):
        return {"best": round(self.pool.best.energy, 6), "evaluations": self.evaluations,
                "tasks": self.generated, "pool": len(self.pool)}
