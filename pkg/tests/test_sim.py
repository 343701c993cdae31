import random

import pytest
from hypothesis import given, settings, strategies as st

from farm.sim.background import ConfigError, WalltimeDist, background_mix, parse_weights
from farm.sim.engine import Simulator
from farm.sim.model import ClusterSpec, JobClass, JobSpec, Reservation
from farm.sim.scenario import load_scenario, parse_scenario, run_scenario, utilization


def normal(job_id, cores, walltime, submit):
    return JobSpec(job_id, cores, walltime, submit)


def simulate(cores, jobs=(), fillins=(), horizon=600, reservations=(), **kw):
    """Run a one-node cluster; ``fillins`` are (time, size, walltime) submissions."""
    sim = Simulator(ClusterSpec([(0, cores)], list(reservations)), list(jobs), **kw)
    plan = sorted(fillins)
    ids = {}

    def on_tick(now):
        for i, (t, size, wall) in enumerate(plan):
            if t == now:
                ids[i] = sim.submit_fillin(size, wall)

    sim.on_tick = on_tick
    sim.tick_interval = 1
    sim.run(horizon)
    return sim, ids


def events(sim, kind):
    return [(e.t, e.job_id) for e in sim.event_log if e.kind == kind]


def test_normal_job_preempts_all_fillins_without_delay():
    sim, ids = simulate(24, [normal(1, 24, 100, 10)], [(0, 8, 1000)] * 3, horizon=60)
    assert sim.normal_starts == [(1, 10)]
    assert sorted(events(sim, "preempt")) == sorted((10, i) for i in ids.values())


def test_fillin_on_empty_cluster_starts_immediately():
    sim, ids = simulate(24, fillins=[(0, 4, 100)], horizon=10)
    assert events(sim, "start") == [(0, ids[0])]


def test_reservation_blocks_long_normal_job_but_not_short_fillin():
    res = [Reservation(100, 200, None)]
    sim, ids = simulate(24, [normal(1, 1, 60, 50)], [(50, 1, 10)], horizon=150, reservations=res)
    assert (ids[0] in [j for _, j in events(sim, "start")])
    assert all(j != 1 for j, _ in sim.normal_starts)


def test_victims_largest_first_then_latest_start():
    fill = [(0, 8, 1000), (1, 8, 1000), (2, 4, 1000), (3, 4, 1000)]
    sim, ids = simulate(24, [normal(1, 10, 100, 10)], fill, horizon=20)
    # 10 cores needed, 0 free: both 8-core jobs go, the later one first.
    assert events(sim, "preempt") == [(10, ids[1]), (10, ids[0])]


def test_requeue_flag():
    for requeue, expect in ((True, 1), (False, 0)):
        sim, ids = simulate(8, [normal(1, 8, 30, 10)], [(0, 8, 1000)], horizon=100, requeue_fillin=requeue)
        starts = [j for _, j in events(sim, "start") if j == ids[0]]
        assert len(starts) == 1 + expect


def test_preempted_fillin_refills_freed_remainder():
    # A 4-core normal job displaces an 8-core fill-in; the other 4 cores get refilled.
    sim, _ = simulate(8, [normal(1, 4, 100, 10)], [(0, 8, 1000), (5, 4, 1000)], horizon=70)
    sample = sim.state.trace[-1]
    assert sample.normal_cores == 4 and sample.fillin_cores == 4


def test_fillin_cap():
    sim, _ = simulate(24, fillins=[(0, 1, 100)] * 10, horizon=10, fillin_job_cap=3)
    assert sim.max_running_fillin == 3


def test_dispatch_cycle():
    sim, _ = simulate(24, [normal(1, 4, 100, 10), normal(2, 4, 100, 61)], horizon=200, dispatch_delay=60)
    assert sim.normal_starts == [(1, 60), (2, 120)]


def test_mask_reservation_reduces_capacity():
    sim, _ = simulate(24, fillins=[(0, 1, 1000)] * 30, horizon=300,
                      reservations=[Reservation(60, 180, 10, "mask")])
    caps = {s.t: s.capacity for s in sim.state.trace}
    assert caps[0] == 24 and caps[1] == 14 and caps[3] == 24
    assert all(s.normal_cores + s.fillin_cores <= s.capacity for s in sim.state.trace)


def test_job_reservation_counts_as_normal_load():
    sim, ids = simulate(24, fillins=[(0, 4, 100)] * 6 + [(0, 4, 10_000)], horizon=400,
                        reservations=[Reservation(120, 240, None, "job")])
    by_t = {s.t: s for s in sim.state.trace}
    assert by_t[1].fillin_cores == 24
    assert by_t[2].normal_cores == 24 and by_t[2].fillin_cores == 0
    # The long fill-in would cross the reservation, so it waits until it is over.
    assert [t for t, j in events(sim, "start") if j == ids[6]] == [240]


def test_node_granular_units():
    cluster = ClusterSpec([(i, 24) for i in range(4)], node_granular=True)
    sim = Simulator(cluster, [normal(1, 3, 100, 0)])
    sim.run(120)
    assert sim.state.trace[0].normal_cores == 72 and sim.state.trace[0].capacity == 96


def test_job_validation():
    with pytest.raises(ValueError):
        JobSpec(1, 0, 10, 0)
    with pytest.raises(ValueError):
        JobSpec(1, 1, 0, 0)
    with pytest.raises(ValueError):
        JobSpec(1, 1, 10, 0, JobClass.NORMAL, requeue_on_preempt=True)


def fcfs_oracle(cores, jobs, horizon):
    """Second-by-second FCFS without fill-ins or reservations."""
    queue, running, starts = [], [], []
    pending = sorted(jobs, key=lambda j: (j.submit_time, j.job_id))
    for t in range(horizon):
        running = [(end, c) for end, c in running if end > t]
        queue += [j for j in pending if j.submit_time == t]
        while queue and queue[0].cores <= cores - sum(c for _, c in running):
            j = queue.pop(0)
            running.append((t + j.walltime, j.cores))
            starts.append((j.job_id, t))
    return starts


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 16), st.integers(1, 200), st.integers(0, 300)), max_size=25),
       st.lists(st.tuples(st.integers(0, 300), st.integers(1, 16), st.integers(1, 400)), max_size=25),
       st.booleans())
def test_fillins_never_change_normal_schedule(normals, fillins, requeue):
    jobs = [normal(i + 1, c, w, s) for i, (c, w, s) in enumerate(normals)]
    horizon = 800
    with_fill, _ = simulate(16, jobs, fillins, horizon=horizon, requeue_fillin=requeue)
    without, _ = simulate(16, jobs, (), horizon=horizon)
    assert with_fill.normal_starts == without.normal_starts == fcfs_oracle(16, jobs, horizon)
    for s in with_fill.state.trace:
        assert s.normal_cores + s.fillin_cores <= s.capacity


# -- background streams ----------------------------------------------------------

def test_zero_rate_is_empty():
    assert background_mix(1, 0, {1: 1}, WalltimeDist.parse("fixed 10"), 3600) == []


def test_same_seed_same_stream():
    args = (7, 30, {1: 2, 4: 1}, WalltimeDist.parse("exp 10 60"), 36000)
    assert background_mix(*args) == background_mix(*args)


def test_interarrival_mean():
    jobs = background_mix(3, 60, {1: 1}, WalltimeDist.parse("fixed 1"), 10_000 * 60 * 1.05)
    assert len(jobs) >= 10_000
    jobs = jobs[:10_000]
    gaps = (jobs[-1].submit_time - jobs[0].submit_time) / (len(jobs) - 1)
    assert gaps == pytest.approx(60.0, rel=0.05)


def test_size_weights():
    jobs = background_mix(5, 600, {1: 3, 8: 1}, WalltimeDist.parse("uniform 1 2"), 3600 * 20)
    share = sum(j.cores == 1 for j in jobs) / len(jobs)
    assert share == pytest.approx(0.75, abs=0.03)
    assert all(60 <= j.walltime <= 120 for j in jobs)


@pytest.mark.parametrize("text", ["uniform 5", "uniform 6 5", "exp -1", "fixed", "gauss 1 2", ""])
def test_bad_walltime(text):
    with pytest.raises(ConfigError):
        WalltimeDist.parse(text)


@pytest.mark.parametrize("text", ["1", "0:1", "1:-1", "a:b", "1:0"])
def test_bad_weights(text):
    with pytest.raises(ConfigError):
        parse_weights(text)


# -- scenarios ---------------------------------------------------------------------

def test_idle_cluster_stays_idle():
    sc = parse_scenario("[cluster]\nnodes = 2x8\nhorizon_min = 30\n")
    res = run_scenario(sc)
    assert len(res.samples) == 30
    assert all(s.normal_cores == 0 and s.fillin_cores == 0 and s.capacity == 16 for s in res.samples)


@pytest.mark.parametrize("text,where", [
    ("[cluster]\nnodes = 2x8\n[bogus]\n", "line 3"),
    ("[cluster]\nnodes = 2x8\nspeed = 3\n", "line 3"),
    ("nodes = 2x8\n", "line 1"),
    ("[cluster]\nnodes = 2x8\n[background]\nrate_per_hour = x\nsizes = 1:1\nwalltime_min = fixed 1\n", "line 4"),
    ("[cluster]\nnodes = 2x8\n[fillin]\npolicy = magic\n", "line 4"),
    ("[cluster]\nnodes = 2x8\n[reservations]\njob = 5 1 all\n", "line 4"),
    ("[cluster]\ngranularity = core\n", "nodes"),
])
def test_config_errors_name_the_line(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_scenario(text)


def test_builtin_scenarios_parse():
    local, center, hlrn = (load_scenario(n) for n in ("local", "center", "hlrn"))
    assert local.cluster.capacity_cores == 276 and local.requeue
    assert center.cluster.capacity_cores == 280 and not center.requeue
    assert hlrn.cluster.total_units == 744 and hlrn.cluster.unit_cores == 24
    assert hlrn.dispatch_delay_s == 60 and hlrn.fillin_job_cap == 24


def test_keep_queued_replayed_against_event_log():
    res = run_scenario(load_scenario("center"), horizon_min=300)
    started_at = {}
    for e in res.event_log:
        if e.kind == "start" and e.job_class == "fillin":
            started_at.setdefault((e.t, e.size), 0)
            started_at[(e.t, e.size)] += 1
    for minute, queued in res.sim.queued_samples:
        for size in (1, 4, 8):
            assert queued.get(size, 0) >= 5 - started_at.get((minute * 60, size), 0)


def test_utilization_window():
    res = run_scenario(load_scenario("local"), horizon_min=60)
    assert 0 < utilization(res.samples, 10, 20) <= 1
    assert utilization([], 0, 10) == 0.0
