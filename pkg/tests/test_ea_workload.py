import struct
import threading

import numpy as np
import pytest

from farm.client import ClientConfig, ClientStatus, run_client
from farm.ea.evolve import Candidate, EaSettings, EaTask, Pool, make_children, random_cluster
from farm.ea.workload import (EaWorkload, decode_result, decode_task, dump_pool, ea_compute, encode_result,
                              encode_task, read_pool_index)
from farm.server import FarmServer, LossPolicy, ServerConfig, ServerHost
from farm.workloads import POISONED, compute_task


def some_task(n=5, seed=3):
    rng = np.random.default_rng(seed)
    a = Candidate(random_cluster(n, rng), -1.5, seed=11)
    b = Candidate(random_cluster(n, rng), -2.5, seed=12)
    return EaTask(a, b, 2, 2**63 - 5, EaSettings(0.2, 0.1, 300, 1e-5))


def test_task_round_trip():
    t = some_task()
    back = decode_task(encode_task(t))
    assert back.n_children == 2 and back.seed == t.seed
    assert back.settings == t.settings
    for x, y in ((t.parent_a, back.parent_a), (t.parent_b, back.parent_b)):
        assert x.same_as(y) and x.seed == y.seed


def test_record_layout():
    c = Candidate(np.arange(6, dtype=float).reshape(2, 3), -1.25, seed=9)
    buf = encode_result([c])
    assert buf[:5] == struct.pack(">BI", 1, 1)
    assert buf[5:9] == struct.pack(">I", 2)
    assert buf[9:57] == struct.pack(">6d", *range(6))
    assert buf[57:] == struct.pack(">dQ", -1.25, 9)


def test_result_round_trip_and_errors():
    kids = make_children(some_task())
    back = decode_result(encode_result(kids))
    assert all(a.same_as(b) for a, b in zip(kids, back))
    with pytest.raises(ValueError):
        decode_result(encode_result(kids) + b"x")
    with pytest.raises(ValueError):
        decode_task(b"\x02" + encode_task(some_task())[1:])


def test_compute_dispatch_matches_local_children():
    t = some_task()
    out = decode_result(compute_task(encode_task(t)))
    assert all(a.same_as(b) for a, b in zip(out, make_children(t)))
    assert ea_compute(encode_task(t)) == encode_result(make_children(t))


def test_dump_and_index(tmp_path):
    p = Pool(4, 0.01)
    rng = np.random.default_rng(0)
    for e in (-3.0, -1.0, -2.0):
        p.merge(Candidate(rng.normal(size=(3, 3)), e))
    d = dump_pool(p, tmp_path / "d")
    index = read_pool_index(d / "pool.tsv")
    assert [r for r, _, _ in index] == [1, 2, 3]
    assert [e for _, e, _ in index] == [-3.0, -2.0, -1.0]
    xyz = (d / "rank001.xyz").read_text().splitlines()
    assert xyz[0] == "3" and len(xyz) == 5
    coords = np.array([[float(v) for v in line.split()[1:]] for line in xyz[2:]])
    assert np.allclose(coords, p.best.coords, atol=1e-9)


def test_workload_budget_and_unique_seeds():
    w = EaWorkload(n_atoms=7, capacity=6, tasks=25, seed=1)
    tasks = w.next_tasks(10) + w.next_tasks(100)
    assert len(tasks) == 25 and w.exhausted()
    seeds = [decode_task(t).seed for t in tasks]
    assert len(set(seeds)) == 25


def test_workload_skips_poison_and_garbage():
    w = EaWorkload(n_atoms=7, capacity=6, tasks=5, seed=1)
    tasks = w.next_tasks(2)
    before = w.pool.best.energy
    w.absorb(tasks, [POISONED, b"\x01\x00"])
    assert w.pool.best.energy == before and w.merged_results == 0


def test_ea_through_the_farm(tmp_path):
    w = EaWorkload(n_atoms=13, capacity=10, tasks=300, seed=2, dump_dir=tmp_path, dump_every_s=0.0)
    core = FarmServer(ServerConfig(lease_ms=2000, chunk_max=4, loss_policy=LossPolicy.DROP), w)
    with ServerHost(core, ("127.0.0.1", 0), drain_grace_ms=200) as host:
        statuses = []
        threads = [threading.Thread(target=lambda: statuses.append(run_client(ClientConfig(host.address, slots=2))))
                   for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(60)
        assert host.wait(5)
    assert statuses == [ClientStatus.DRAINED] * 2
    assert core.ledger.completed == 300
    assert all(b <= a for a, b in zip(w.best_history, w.best_history[1:]))
    dumps = sorted(tmp_path.glob("dump*"))
    assert len(dumps) >= 2
    bests = [read_pool_index(d / "pool.tsv")[0][1] for d in dumps]
    assert all(b <= a for a, b in zip(bests, bests[1:]))
    assert read_pool_index(tmp_path / "final" / "pool.tsv")[0][1] == pytest.approx(w.pool.best.energy, abs=1e-11)
