"""Per-user cluster brain, as a pure state machine.

All mutations take an explicit `now` so the same code runs under the
virtual-clock facility and the wall-clock TLS service; both serialize every
mutation through a single logical owner (event loop), so no locking happens
here.

Scheduling discipline: tasks leave the queue FIFO by (job order, chunk id);
among workers with spare cores the fewest-running wins, worker_id breaking
ties.  Workers are recorded when they are *requested* (registered_at), and
become assignable when they arrive; the gap to their first task is the
per-worker stall the benchmark profiles.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from dataclasses import dataclass, field

from ..cacf import plan_chunks
from ..engine.hist import Histogram, merge_histograms
from ..engine.pipeline import KernelPipeline, TaskResult
from ..types import DatasetSpec, FileChunk, TaskSpec

log = logging.getLogger(__name__)

DEFAULT_CORES = 4
HEARTBEAT_INTERVAL = 2.0
HEARTBEAT_TIMEOUT = 10.0
AUTOSCALE_INTERVAL = 1.0


class SchedulerError(ValueError):
    pass


@dataclass
class ScalePolicy:
    mode: str = "adaptive"  # "adaptive" | "fixed"
    fixed_n: int = 0
    tasks_per_worker: int = 4
    n_min: int = 0
    n_max: int = 50
    idle_timeout: float = 30.0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise SchedulerError(f"unknown scale mode {self.mode!r}")
        if self.tasks_per_worker < 1:
            raise SchedulerError("tasks_per_worker must be >= 1")
        if self.n_min > self.n_max:
            raise SchedulerError("n_min must be <= n_max")


def autoscale_target(queued: int, running: int, policy: ScalePolicy) -> int:
    """clamp(ceil((queued+running)/rho), n_min, n_max)."""
    desired = math.ceil((queued + running) / policy.tasks_per_worker)
    return max(policy.n_min, min(policy.n_max, desired))


@dataclass
class WorkerState:
    worker_id: str
    identity: str
    registered_at: float
    last_heartbeat: float
    n_cores: int = DEFAULT_CORES
    running: set = field(default_factory=set)  # of (job_id, chunk_id)
    first_task_at: float | None = None
    arrived: bool = False
    idle_since: float = 0.0
    batch_handle: int | None = None

    @property
    def capacity(self) -> int:
        return self.n_cores - len(self.running)


@dataclass
class TaskStreamEvent:
    kind: str  # WorkerUp | WorkerDown | TaskStart | TaskEnd | ScaleDecision
    worker_id: str
    chunk_id: int | None
    t: float
    detail: str = ""


def events_to_csv(events: list[TaskStreamEvent]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["kind", "worker_id", "chunk_id", "t", "detail"])
    for e in events:
        writer.writerow([e.kind, e.worker_id, "" if e.chunk_id is None else e.chunk_id, repr(e.t), e.detail])
    return out.getvalue()


@dataclass
class JobState:
    job_id: str
    seq: int
    pipeline_json: list
    pipeline: KernelPipeline
    dataset: DatasetSpec
    chunks: dict[int, FileChunk]
    submitted_at: float
    queued: set = field(default_factory=set)
    assigned: dict = field(default_factory=dict)  # chunk_id -> worker_id
    done: set = field(default_factory=set)
    failed: set = field(default_factory=set)
    merged: dict = field(default_factory=dict)  # hist name -> Histogram
    n_events_in: int = 0
    n_events_pass: int = 0
    finished_at: float | None = None

    @property
    def state(self) -> str:
        if self.failed and not self.queued and not self.assigned:
            return "failed"
        if self.finished_at is not None:
            return "done"
        return "running"

    def status(self) -> dict:
        body = {
            "job_id": self.job_id,
            "state": self.state,
            "queued": len(self.queued),
            "assigned": len(self.assigned),
            "done": len(self.done),
            "failed": len(self.failed),
            "n_events_in": self.n_events_in,
            "n_events_pass": self.n_events_pass,
            "submitted_at": self.submitted_at,
            "finished_at": self.finished_at,
        }
        if self.state == "done":
            body["histograms"] = [self.merged[name].to_dict() for name in sorted(self.merged)]
        return body


class ClusterState:
    def __init__(self, cluster_id: str = "cluster"):
        self.cluster_id = cluster_id
        self.workers: dict[str, WorkerState] = {}
        self.jobs: dict[str, JobState] = {}
        self.events: list[TaskStreamEvent] = []
        self._queue: list[tuple[int, int, str]] = []  # (job_seq, chunk_id, job_id)
        self._job_seq = 0
        self._worker_seq = 0

    # ---- workers ----------------------------------------------------------

    def next_worker_id(self) -> str:
        self._worker_seq += 1
        return f"w{self._worker_seq:04d}"

    def expect_worker(
        self,
        now: float,
        n_cores: int = DEFAULT_CORES,
        worker_id: str | None = None,
        batch_handle: int | None = None,
    ) -> str:
        """Record a requested worker; it becomes assignable once it arrives."""
        worker_id = worker_id or self.next_worker_id()
        if worker_id in self.workers:
            raise SchedulerError(f"worker {worker_id!r} already known")
        self.workers[worker_id] = WorkerState(
            worker_id=worker_id,
            identity="",
            registered_at=now,
            last_heartbeat=now,
            n_cores=n_cores,
            batch_handle=batch_handle,
        )
        self.events.append(TaskStreamEvent("WorkerUp", worker_id, None, now, "requested"))
        return worker_id

    def worker_arrived(
        self,
        worker_id: str | None,
        identity: str,
        now: float,
        n_cores: int = DEFAULT_CORES,
    ) -> str:
        """WorkerHello: activate a requested worker, or direct-register a new one."""
        if worker_id is None or worker_id not in self.workers:
            worker_id = self.expect_worker(now, n_cores=n_cores, worker_id=worker_id)
        w = self.workers[worker_id]
        w.arrived = True
        w.identity = identity
        w.last_heartbeat = max(w.last_heartbeat, now)
        w.idle_since = now
        return worker_id

    def heartbeat(self, worker_id: str, now: float) -> None:
        w = self.workers.get(worker_id)
        if w is None:
            raise SchedulerError(f"heartbeat from unknown worker {worker_id!r}")
        w.last_heartbeat = max(w.last_heartbeat, now)

    def remove_worker(self, worker_id: str, now: float, reason: str) -> list[int]:
        """Drop a worker, requeueing whatever it was running."""
        w = self.workers.pop(worker_id, None)
        if w is None:
            return []
        requeued = []
        for job_id, chunk_id in sorted(w.running):
            job = self.jobs[job_id]
            if job.assigned.get(chunk_id) == worker_id:
                del job.assigned[chunk_id]
                job.queued.add(chunk_id)
                heapq.heappush(self._queue, (job.seq, chunk_id, job_id))
                requeued.append(chunk_id)
        self.events.append(TaskStreamEvent("WorkerDown", worker_id, None, now, reason))
        return requeued

    def reap_lost_workers(self, now: float, timeout: float = HEARTBEAT_TIMEOUT) -> list[int]:
        requeued = []
        for worker_id in [
            wid
            for wid, w in sorted(self.workers.items())
            if w.arrived and now - w.last_heartbeat > timeout
        ]:
            requeued.extend(self.remove_worker(worker_id, now, "heartbeat timeout"))
        return requeued

    def n_supplied(self) -> int:
        """Workers requested or alive; the autoscaler's notion of supply."""
        return len(self.workers)

    def idle_workers(self, now: float, idle_timeout: float) -> list[str]:
        return [
            wid
            for wid, w in sorted(self.workers.items())
            if w.arrived and not w.running and now - w.idle_since >= idle_timeout
        ]

    # ---- jobs -------------------------------------------------------------

    def submit_job(
        self,
        pipeline_json: list,
        dataset: DatasetSpec,
        chunk_size: int,
        now: float,
        events_per_file: list[int] | None = None,
        identity: str = "",
    ) -> str:
        pipeline = KernelPipeline.from_json(pipeline_json)
        chunks = plan_chunks(dataset, chunk_size, events_per_file=events_per_file)
        self._job_seq += 1
        job_id = f"job-{self._job_seq:04d}"
        job = JobState(
            job_id=job_id,
            seq=self._job_seq,
            pipeline_json=pipeline_json,
            pipeline=pipeline,
            dataset=dataset,
            chunks={c.chunk_id: c for c in chunks},
            submitted_at=now,
        )
        job.queued = set(job.chunks)
        self.jobs[job_id] = job
        for c in chunks:
            heapq.heappush(self._queue, (job.seq, c.chunk_id, job_id))
        log.info("job %s: %d chunks over %d files (by %s)", job_id, len(chunks), len(dataset.files), identity)
        return job_id

    def total_queued(self) -> int:
        return sum(len(j.queued) for j in self.jobs.values())

    def total_assigned(self) -> int:
        return sum(len(j.assigned) for j in self.jobs.values())

    def unfinished_jobs(self) -> list[str]:
        return [j.job_id for j in self.jobs.values() if j.state == "running"]

    # ---- scheduling -------------------------------------------------------

    def schedule_step(self, now: float) -> list[tuple[str, TaskSpec]]:
        assignments: list[tuple[str, TaskSpec]] = []
        while self._queue:
            eligible = [w for w in self.workers.values() if w.arrived and w.capacity > 0]
            if not eligible:
                break
            seq, chunk_id, job_id = self._queue[0]
            job = self.jobs[job_id]
            if chunk_id not in job.queued:
                heapq.heappop(self._queue)  # stale entry (completed elsewhere or re-pushed)
                continue
            heapq.heappop(self._queue)
            worker = min(eligible, key=lambda w: (len(w.running), w.worker_id))
            job.queued.remove(chunk_id)
            job.assigned[chunk_id] = worker.worker_id
            worker.running.add((job_id, chunk_id))
            if worker.first_task_at is None:
                worker.first_task_at = now
            self.events.append(TaskStreamEvent("TaskStart", worker.worker_id, chunk_id, now, job_id))
            assignments.append(
                (worker.worker_id, TaskSpec(job_id=job_id, chunk=job.chunks[chunk_id], pipeline=tuple(job.pipeline_json)))
            )
        return assignments

    def complete_task(
        self, worker_id: str, job_id: str, chunk_id: int, result: TaskResult, now: float
    ) -> dict:
        job = self.jobs.get(job_id)
        if job is None:
            raise SchedulerError(f"unknown job {job_id!r}")
        if chunk_id in job.done:
            log.info("duplicate completion for %s chunk %d ignored", job_id, chunk_id)
            return job.status()
        owner = job.assigned.get(chunk_id)
        if owner != worker_id:
            raise SchedulerError(
                f"chunk {chunk_id} of {job_id} is not assigned to worker {worker_id!r}"
            )
        del job.assigned[chunk_id]
        job.done.add(chunk_id)
        job.n_events_in += result.n_events_in
        job.n_events_pass += result.n_events_pass
        for h in result.histograms:
            if h.name in job.merged:
                job.merged[h.name] = merge_histograms(job.merged[h.name], h)
            else:
                job.merged[h.name] = h
        worker = self.workers.get(worker_id)
        if worker is not None:
            worker.running.discard((job_id, chunk_id))
            if not worker.running:
                worker.idle_since = now
        self.events.append(TaskStreamEvent("TaskEnd", worker_id, chunk_id, now, job_id))
        if not job.queued and not job.assigned and job.finished_at is None and not job.failed:
            job.finished_at = now
        return job.status()

    def fail_task(self, worker_id: str, job_id: str, chunk_id: int, reason: str, now: float) -> dict:
        job = self.jobs.get(job_id)
        if job is None:
            raise SchedulerError(f"unknown job {job_id!r}")
        if job.assigned.get(chunk_id) == worker_id:
            del job.assigned[chunk_id]
            job.failed.add(chunk_id)
            worker = self.workers.get(worker_id)
            if worker is not None:
                worker.running.discard((job_id, chunk_id))
                if not worker.running:
                    worker.idle_since = now
            self.events.append(
                TaskStreamEvent("TaskEnd", worker_id, chunk_id, now, f"failed: {reason}")
            )
            log.warning("task %s/%d failed on %s: %s", job_id, chunk_id, worker_id, reason)
        return job.status()

    def record_scale_decision(self, target: int, queued: int, running: int, now: float) -> None:
        self.events.append(
            TaskStreamEvent(
                "ScaleDecision", "", None, now, f"target={target} queued={queued} running={running}"
            )
        )


class Autoscaler:
    """Drives worker supply toward the policy target via batch callbacks.

    request_workers(count, now) must create the batch jobs and call
    state.expect_worker for each; cancel_worker(worker_id, now) must tear the
    batch job down.  Scale-down touches only workers idle past the policy's
    idle_timeout.
    """

    def __init__(self, state: ClusterState, policy: ScalePolicy, request_workers, cancel_worker):
        self.state = state
        self.policy = policy
        self.request_workers = request_workers
        self.cancel_worker = cancel_worker
        self._last_target: int | None = None

    def tick(self, now: float) -> int:
        queued = self.state.total_queued()
        running = self.state.total_assigned()
        if self.policy.mode == "fixed":
            target = self.policy.fixed_n
        else:
            target = autoscale_target(queued, running, self.policy)
        if target != self._last_target:
            self.state.record_scale_decision(target, queued, running, now)
            self._last_target = target
        supply = self.state.n_supplied()
        if target > supply:
            self.request_workers(target - supply, now)
        elif target < supply:
            spare = supply - target
            for worker_id in self.state.idle_workers(now, self.policy.idle_timeout)[:spare]:
                self.cancel_worker(worker_id, now)
        return target
