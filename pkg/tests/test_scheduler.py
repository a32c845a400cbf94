import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casa_mini.engine.hist import Histogram
from casa_mini.engine.pipeline import TaskResult
from casa_mini.scheduler.state import (
    Autoscaler,
    ClusterState,
    ScalePolicy,
    SchedulerError,
    autoscale_target,
    events_to_csv,
)
from casa_mini.types import DatasetSpec

PIPELINE = [{"hist": ["h", "pt", 2, 0, 10]}]


def _dataset(n_files=2, events=100):
    return (
        DatasetSpec(name="d", files=tuple(f"f{i}" for i in range(n_files)), n_events_total=n_files * events),
        [events] * n_files,
    )


def _submit(state, chunk_size=50, n_files=2, events=100):
    ds, epf = _dataset(n_files, events)
    return state.submit_job(PIPELINE, ds, chunk_size, now=0.0, events_per_file=epf)


def _result(chunk_id, n=50, counts=(1, 0)):
    h = Histogram(name="h", n_bins=2, lo=0.0, hi=10.0, counts=np.array(counts, dtype=np.uint64))
    h.n_filled = int(sum(counts))
    return TaskResult(chunk_id=chunk_id, n_events_in=n, n_events_pass=int(sum(counts)), histograms=[h])


def test_submit_benchmark_arithmetic():
    state = ClusterState()
    ds = DatasetSpec(name="bench", files=tuple(f"f{i}" for i in range(18)), n_events_total=450_000)
    job_id = state.submit_job(PIPELINE, ds, 5000, now=0.0, events_per_file=[25_000] * 18)
    assert len(state.jobs[job_id].queued) == 90


def test_submit_bad_pipeline_rejected():
    state = ClusterState()
    ds, epf = _dataset()
    with pytest.raises(Exception):
        state.submit_job([{"filter": "1"}], ds, 50, 0.0, events_per_file=epf)


def test_schedule_three_tasks_one_worker():
    state = ClusterState()
    ds, epf = _dataset(n_files=1, events=150)
    state.submit_job(PIPELINE, ds, 50, 0.0, events_per_file=epf)
    state.worker_arrived("w1", "alice", 1.0, n_cores=4)
    assignments = state.schedule_step(1.0)
    assert [w for w, _ in assignments] == ["w1", "w1", "w1"]
    assert len(state.workers["w1"].running) == 3


def test_schedule_tiebreak_lowest_worker_id():
    state = ClusterState()
    ds, epf = _dataset(n_files=1, events=50)
    state.submit_job(PIPELINE, ds, 50, 0.0, events_per_file=epf)
    state.worker_arrived("w2", "alice", 1.0)
    state.worker_arrived("w1", "alice", 1.0)
    assignments = state.schedule_step(1.0)
    assert assignments[0][0] == "w1"


def test_schedule_no_workers():
    state = ClusterState()
    _submit(state)
    assert state.schedule_step(1.0) == []


def test_schedule_fifo_across_jobs():
    state = ClusterState()
    j1 = _submit(state, chunk_size=100, n_files=1)  # 1 chunk
    j2 = _submit(state, chunk_size=100, n_files=1)
    state.worker_arrived("w1", "alice", 1.0, n_cores=1)
    ((_, first),) = state.schedule_step(1.0)
    assert first.job_id == j1
    state.complete_task("w1", j1, 0, _result(0, n=100), 2.0)
    ((_, second),) = state.schedule_step(2.0)
    assert second.job_id == j2


def test_respects_core_limit():
    state = ClusterState()
    _submit(state, chunk_size=10)  # 20 chunks
    state.worker_arrived("w1", "alice", 0.0, n_cores=4)
    assignments = state.schedule_step(0.0)
    assert len(assignments) == 4
    assert state.schedule_step(0.0) == []  # full


def test_complete_flow_and_merge():
    state = ClusterState()
    job_id = _submit(state, chunk_size=100, n_files=2)  # 2 chunks
    state.worker_arrived("w1", "alice", 0.0)
    state.schedule_step(0.0)
    state.complete_task("w1", job_id, 0, _result(0, n=100, counts=(1, 2)), 1.0)
    assert state.jobs[job_id].state == "running"
    status = state.complete_task("w1", job_id, 1, _result(1, n=100, counts=(4, 8)), 2.0)
    assert status["state"] == "done"
    job = state.jobs[job_id]
    assert job.finished_at == 2.0
    assert list(job.merged["h"].counts) == [5, 10]


def test_duplicate_completion_idempotent():
    state = ClusterState()
    job_id = _submit(state, chunk_size=100, n_files=1)
    state.worker_arrived("w1", "alice", 0.0)
    state.schedule_step(0.0)
    state.complete_task("w1", job_id, 0, _result(0, n=100), 1.0)
    before = state.jobs[job_id].status()
    after = state.complete_task("w1", job_id, 0, _result(0, n=100), 2.0)
    assert after == before
    assert state.jobs[job_id].n_events_in == 100  # not double-counted


def test_completion_from_wrong_worker_rejected():
    state = ClusterState()
    job_id = _submit(state, chunk_size=100, n_files=1)
    state.worker_arrived("w1", "alice", 0.0)
    state.schedule_step(0.0)
    with pytest.raises(SchedulerError, match="not assigned"):
        state.complete_task("w9", job_id, 0, _result(0, n=100), 1.0)


def test_reap_requeues_running_chunks():
    state = ClusterState()
    job_id = _submit(state, chunk_size=100)  # 2 chunks
    state.worker_arrived("w1", "alice", 0.0)
    state.schedule_step(0.0)
    assert len(state.jobs[job_id].assigned) == 2
    requeued = state.reap_lost_workers(now=20.0, timeout=10.0)
    assert sorted(requeued) == [0, 1]
    assert "w1" not in state.workers
    assert state.jobs[job_id].queued == {0, 1}
    # a fresh worker picks the chunks back up
    state.worker_arrived("w2", "alice", 21.0)
    assert len(state.schedule_step(21.0)) == 2


def test_reap_no_timeouts():
    state = ClusterState()
    state.worker_arrived("w1", "alice", 0.0)
    state.heartbeat("w1", 5.0)
    assert state.reap_lost_workers(now=6.0, timeout=10.0) == []
    assert "w1" in state.workers


def test_requested_workers_not_assignable():
    state = ClusterState()
    _submit(state)
    state.expect_worker(0.0, worker_id="w1")
    assert state.schedule_step(0.0) == []  # requested but not arrived
    state.worker_arrived("w1", "alice", 3.0)
    assert len(state.schedule_step(3.0)) == 4


def test_stall_fields():
    state = ClusterState()
    _submit(state)
    state.expect_worker(0.0, worker_id="w1")
    state.worker_arrived("w1", "alice", 3.0)
    state.schedule_step(3.0)
    w = state.workers["w1"]
    assert w.registered_at == 0.0 and w.first_task_at == 3.0
    assert w.last_heartbeat >= w.registered_at


# ---- autoscale_target ---------------------------------------------------------


def test_autoscale_examples():
    policy = ScalePolicy(tasks_per_worker=4, n_min=0, n_max=50)
    assert autoscale_target(104, 0, policy) == 26
    assert autoscale_target(90, 0, policy) == 23
    assert autoscale_target(0, 0, policy) == 0


def test_autoscale_clamps():
    policy = ScalePolicy(tasks_per_worker=4, n_min=2, n_max=10)
    assert autoscale_target(0, 0, policy) == 2
    assert autoscale_target(1000, 0, policy) == 10


@settings(max_examples=200, deadline=None)
@given(
    q1=st.integers(min_value=0, max_value=10_000),
    q2=st.integers(min_value=0, max_value=10_000),
    r1=st.integers(min_value=0, max_value=1_000),
    r2=st.integers(min_value=0, max_value=1_000),
    rho=st.integers(min_value=1, max_value=32),
    n_min=st.integers(min_value=0, max_value=10),
    extra=st.integers(min_value=0, max_value=100),
)
def test_autoscale_monotone_and_bounded(q1, q2, r1, r2, rho, n_min, extra):
    policy = ScalePolicy(tasks_per_worker=rho, n_min=n_min, n_max=n_min + extra)
    lo = autoscale_target(min(q1, q2), min(r1, r2), policy)
    hi = autoscale_target(max(q1, q2), max(r1, r2), policy)
    assert lo <= hi  # monotone in pending work
    for t in (lo, hi):
        assert policy.n_min <= t <= policy.n_max


def test_autoscaler_requests_and_cancels():
    state = ClusterState()
    _submit(state, chunk_size=25)  # 8 chunks -> target 2 at rho 4
    requested, cancelled = [], []

    def request(count, now):
        for _ in range(count):
            wid = state.next_worker_id()
            state.expect_worker(now, worker_id=wid)
            requested.append(wid)

    policy = ScalePolicy(mode="adaptive", tasks_per_worker=4, idle_timeout=5.0)
    scaler = Autoscaler(state, policy, request, lambda wid, now: cancelled.append(wid) or state.remove_worker(wid, now, "down"))
    assert scaler.tick(0.0) == 2
    assert len(requested) == 2
    # drain the queue, workers become idle, scale-down after idle_timeout
    for wid in requested:
        state.worker_arrived(wid, "alice", 1.0)
    state.schedule_step(1.0)
    job = next(iter(state.jobs.values()))
    for chunk_id, wid in list(job.assigned.items()):
        state.complete_task(wid, job.job_id, chunk_id, _result(chunk_id, n=25), 2.0)
    scaler.tick(3.0)  # target 0 but nothing idle long enough
    assert cancelled == []
    scaler.tick(8.0)
    assert sorted(cancelled) == sorted(requested)


def test_events_csv_shape():
    state = ClusterState()
    _submit(state)
    state.worker_arrived("w1", "alice", 1.5)
    state.schedule_step(1.5)
    text = events_to_csv(state.events)
    lines = text.splitlines()
    assert lines[0] == "kind,worker_id,chunk_id,t,detail"
    assert lines[1].startswith("WorkerUp,w1,,1.5")
    assert any(line.startswith("TaskStart,w1,0,1.5") for line in lines)


def test_fail_task_marks_failed():
    state = ClusterState()
    job_id = _submit(state, chunk_size=100, n_files=1)
    state.worker_arrived("w1", "alice", 0.0)
    state.schedule_step(0.0)
    status = state.fail_task("w1", job_id, 0, "boom", 1.0)
    assert status["state"] == "failed"
    assert state.jobs[job_id].failed == {0}
