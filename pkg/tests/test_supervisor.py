import json
import sys
import threading
import time

import pytest

from farm.supervisor.adapters import ProcessAdapter, TemplateAdapter
from farm.supervisor.policies import (AdapterUnavailable, DynamicFit, KeepQueued, RunningJob, SchedState,
                                      StaticMix, tick)
from farm.supervisor.runner import run_supervisor


class FakeAdapter:
    """Reports a fixed state and records calls."""

    def __init__(self, state: SchedState):
        self.state = state
        self.calls = []
        self._ids = iter(range(100, 10_000))

    def query_state(self):
        return self.state

    def submit(self, size, walltime):
        self.calls.append(("submit", size, walltime))
        return next(self._ids)

    def cancel(self, job_id):
        self.calls.append(("cancel", job_id))


class Unavailable(FakeAdapter):
    def query_state(self):
        raise AdapterUnavailable("scheduler down")


def test_keep_queued_deficit():
    a = FakeAdapter(SchedState(free=0, queued_fillin={1: 5, 4: 3, 8: 5}))
    actions = tick(KeepQueued({1: 5, 4: 5, 8: 5}), a, 60)
    assert [(x.kind, x.size) for x in actions] == [("submit", 4), ("submit", 4)]


def test_dynamic_merge_smallest():
    running = [RunningJob(i, 2 if i == 7 else 10, start=i) for i in range(24)]
    a = FakeAdapter(SchedState(free=3, running_fillin=running))
    actions = tick(DynamicFit(60, 24, 240 * 60), a, 600)
    assert a.calls == [("cancel", 7), ("submit", 5, 240 * 60)]
    assert [x.reason for x in actions] == ["merge_smallest", "merge_smallest"]


def test_dynamic_nothing_free():
    a = FakeAdapter(SchedState(free=0))
    assert tick(DynamicFit(), a, 0) == [] and a.calls == []


def test_dynamic_walltime_stops_before_reservation():
    a = FakeAdapter(SchedState(free=10, next_reservation=3600))
    tick(DynamicFit(60, 24, 240 * 60), a, 1200)
    assert a.calls == [("submit", 10, 3600 - 1200 - 60)]


def test_dynamic_no_window_left():
    a = FakeAdapter(SchedState(free=10, next_reservation=1230))
    assert tick(DynamicFit(60, 24, 240 * 60), a, 1200) == []


def test_dynamic_counts_queued_units():
    queued = [RunningJob(50, 4)]
    a = FakeAdapter(SchedState(free=10, queued_fillin={4: 1}, queued_jobs_list=queued))
    tick(DynamicFit(), a, 0)
    assert a.calls == [("submit", 6, 240 * 60)]


def test_dynamic_cancels_queued_jobs_that_no_longer_fit():
    queued = [RunningJob(50, 40)]
    a = FakeAdapter(SchedState(free=10, queued_fillin={40: 1}, queued_jobs_list=queued))
    tick(DynamicFit(), a, 0)
    assert a.calls == [("cancel", 50), ("submit", 10, 240 * 60)]


def test_static_mix_once():
    a = FakeAdapter(SchedState(free=0))
    first = tick(StaticMix({1: 2, 4: 1}), a, 0)
    assert sorted(x.size for x in first) == [1, 1, 4]
    assert tick(StaticMix({1: 2, 4: 1}), a, 60) == []


def test_static_mix_maintained():
    a = FakeAdapter(SchedState(free=0, running_fillin=[RunningJob(1, 1)], queued_fillin={4: 1}))
    actions = tick(StaticMix({1: 2, 4: 1}, maintain=True), a, 600)
    assert [x.size for x in actions] == [1]


def test_tick_is_stateless():
    state = SchedState(free=7, queued_fillin={1: 2}, running_fillin=[RunningJob(3, 2)])
    for policy in (KeepQueued({1: 5, 4: 5}), DynamicFit(), StaticMix({1: 3}, maintain=True)):
        a1, a2 = FakeAdapter(state), FakeAdapter(state)
        tick(policy, a1, 120)
        tick(policy, a2, 120)
        assert a1.calls == a2.calls


def test_policy_validation():
    with pytest.raises(ValueError):
        DynamicFit(job_cap=0)
    with pytest.raises(ValueError):
        tick(KeepQueued({0: 1}), FakeAdapter(SchedState(free=0)), 0)


def test_log_line_format():
    a = FakeAdapter(SchedState(free=3))
    (act,) = tick(DynamicFit(), a, 60)
    assert act.log_line() == "t=60 action=submit job_id=100 size=3 reason=fit_free walltime=14400"


def test_unavailable_adapter_propagates():
    with pytest.raises(AdapterUnavailable):
        tick(KeepQueued({1: 1}), Unavailable(SchedState(free=0)), 0)


# -- control loop ---------------------------------------------------------------

def test_zero_horizon_empty_log():
    assert run_supervisor(KeepQueued({1: 1}), FakeAdapter(SchedState(free=0)), 0.01, 0) == []


def test_retry_budget_then_stop():
    lines = run_supervisor(KeepQueued({1: 1}), Unavailable(SchedState(free=0)), 0.001, 10, retry_budget=2)
    assert sum("event=adapter_unavailable" in line for line in lines) == 3
    assert lines[-1].endswith("reason=adapter_failed")


def test_loop_logs_actions_and_honours_stop():
    stop = threading.Event()
    a = FakeAdapter(SchedState(free=0, queued_fillin={}))
    threading.Timer(0.2, stop.set).start()
    t0 = time.monotonic()
    lines = run_supervisor(KeepQueued({1: 2}), a, 0.02, 60, stop=stop)
    assert time.monotonic() - t0 < 5
    assert lines[:2] == ["t=0 action=submit job_id=100 size=1 reason=keep_queued walltime=120000",
                         "t=0 action=submit job_id=101 size=1 reason=keep_queued walltime=120000"]


# -- process adapter ------------------------------------------------------------------

def sleeper(seconds):
    return lambda size: [sys.executable, "-c", f"import time; time.sleep({seconds})"]


def test_process_adapter_budget_and_preemption():
    budget = {"n": 2}
    a = ProcessAdapter(sleeper(30), lambda: budget["n"])
    try:
        ids = [a.submit(1, 600) for _ in range(3)]
        a.poll()
        st = a.query_state()
        assert [j.job_id for j in st.running_fillin] == ids[:2]
        assert st.queued_fillin == {1: 1} and st.free == 0
        budget["n"] = 1
        a.poll()
        assert a.preempted == 1
        assert a.wait_all(0) is False
        time.sleep(0.5)
        a.poll()
        assert [j.job_id for j in a.query_state().running_fillin] == [ids[0]]
        assert [j.returncode for j in a.done] == [-15]
    finally:
        a.kill_all()
    assert a.live_processes() == []


def test_process_adapter_walltime_and_finished():
    a = ProcessAdapter(sleeper(0), 1)
    a.submit(1, 600)
    a.poll()
    assert a.wait_all(10)
    assert a.finished and a.done[0].returncode == 0
    b = ProcessAdapter(sleeper(30), 1)
    b.submit(1, 0.1)
    b.poll()
    time.sleep(0.2)
    b.poll()
    assert b.wait_all(5) and b.done[0].returncode == -15


def test_process_adapter_cancel():
    a = ProcessAdapter(sleeper(30), 0)
    jid = a.submit(2, 60)
    a.cancel(jid)
    assert a.queued == []
    with pytest.raises(KeyError):
        a.cancel(jid)


# -- template adapter -------------------------------------------------------------------

def test_template_adapter(tmp_path):
    state = {"free": 12, "queued": [[1, 3]], "running": [[17, 4]], "next_reservation": 900}
    (tmp_path / "state.json").write_text(json.dumps(state))
    py = sys.executable
    a = TemplateAdapter(
        submit=f"{py} -c \"print('submitted job', {{size}} * 1000 + {{walltime}})\"",
        cancel=f"{py} -c \"import sys; sys.exit(0 if {{job_id}} == 17 else 1)\"",
        query=f"{py} -c \"print(open('{tmp_path / 'state.json'}').read())\"",
    )
    st = a.query_state()
    assert st.free == 12 and st.queued_fillin == {1: 3} and st.next_reservation == 900
    assert st.running_fillin == [RunningJob(17, 4)]
    assert a.submit(4, 60) == 4060
    a.cancel(17)
    with pytest.raises(AdapterUnavailable):
        a.cancel(18)


def test_template_adapter_bad_output():
    a = TemplateAdapter(submit="echo nothing", cancel="true", query="echo not-json")
    with pytest.raises(AdapterUnavailable):
        a.query_state()
    with pytest.raises(AdapterUnavailable):
        a.submit(1, 60)
    b = TemplateAdapter(submit="/nonexistent/submit", cancel="true", query="true")
    with pytest.raises(AdapterUnavailable):
        b.submit(1, 60)
