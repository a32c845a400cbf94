"""Virtual-clock facility: scheduler, batch system, and simulated workers
advancing deterministically from one event loop.

Simulated compute charges chunk_len / rate virtual seconds per task against a
worker's single execution timeline (`rate` is the per-worker event rate; a
worker's cores bound how many tasks it holds, not its throughput), while task
*results* come from really evaluating the pipeline on the chunk, fetched
through the facility data proxy.  That keeps the scaling study analytic and
the merged histograms oracle-checkable at the same time.

Same seed, same submissions: identical event order, identical task stream.
"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field

from . import cacf
from .batchsim import BatchSim, DelayModel, JobSpec
from .data_proxy import SyncDataProxy, rewrite_url
from .engine.pipeline import KernelPipeline, run_pipeline
from .scheduler.state import (
    AUTOSCALE_INTERVAL,
    DEFAULT_CORES,
    HEARTBEAT_TIMEOUT,
    Autoscaler,
    ClusterState,
    ScalePolicy,
)
from .types import DatasetSpec, TaskSpec

log = logging.getLogger(__name__)


class VirtualLoop:
    """Deterministic event heap: (time, insertion seq) ordering."""

    def __init__(self):
        self.now = 0.0
        self._heap: list[tuple[float, int, object]] = []
        self._seq = 0

    def schedule_at(self, t: float, fn) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule into the past ({t} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn))

    def schedule(self, delay: float, fn) -> None:
        self.schedule_at(self.now + delay, fn)

    def run(self, max_time: float = 1e9) -> None:
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            if t > max_time:
                raise RuntimeError(f"virtual run exceeded {max_time} s")
            self.now = t
            fn()


@dataclass
class _SimWorker:
    worker_id: str
    handle: int | None
    n_cores: int
    alive: bool = True
    busy: bool = False
    pending: deque = field(default_factory=deque)


@dataclass
class SimParams:
    rate: float = 4000.0  # per-worker events/s in simulated compute
    n_cores: int = DEFAULT_CORES
    heartbeat_timeout: float = HEARTBEAT_TIMEOUT
    tick: float = AUTOSCALE_INTERVAL


class VirtualFacility:
    """One per-user cluster plus batch scale-out on a virtual clock."""

    def __init__(
        self,
        proxy: SyncDataProxy,
        data_token: str,
        batch_token: str,
        policy: ScalePolicy,
        delay: DelayModel | None = None,
        slots: int = 200,
        params: SimParams | None = None,
        batch_key: bytes | None = None,
    ):
        self.loop = VirtualLoop()
        self.proxy = proxy
        self.data_token = data_token
        self.batch_token = batch_token
        self.params = params or SimParams()
        self.state = ClusterState()
        self.batch = BatchSim(
            delay=delay or DelayModel(),
            slots=slots,
            batch_key=batch_key,
            on_start=self._on_batch_start,
        )
        self.autoscaler = Autoscaler(self.state, policy, self._request_workers, self._cancel_worker)
        self.sim_workers: dict[str, _SimWorker] = {}
        self._pipelines: dict[str, KernelPipeline] = {}
        self._batch_wakeups: set[float] = set()
        self._kill_plan: list[tuple[float, str]] = []

    # ---- batch plumbing ----------------------------------------------------

    def _request_workers(self, count: int, now: float) -> None:
        for _ in range(count):
            worker_id = self.state.next_worker_id()
            spec = JobSpec(
                n_cores=self.params.n_cores,
                worker_config={"worker_id": worker_id},
                batch_token=self.batch_token,
            )
            handle = self.batch.submit(spec, now)
            self.state.expect_worker(
                now, n_cores=self.params.n_cores, worker_id=worker_id, batch_handle=handle
            )
        self._arm_batch_wakeup()

    def _cancel_worker(self, worker_id: str, now: float) -> None:
        w = self.state.workers.get(worker_id)
        if w is not None and w.batch_handle is not None:
            self.batch.cancel(w.batch_handle, now)
        sw = self.sim_workers.pop(worker_id, None)
        if sw is not None:
            sw.alive = False
        self.state.remove_worker(worker_id, now, "scaled down")

    def _arm_batch_wakeup(self) -> None:
        t = self.batch.next_event_time()
        if t is None or t in self._batch_wakeups:
            return
        self._batch_wakeups.add(t)
        self.loop.schedule_at(t, lambda: self._batch_advance(t))

    def _batch_advance(self, t: float) -> None:
        self._batch_wakeups.discard(t)
        self.batch.advance(t)
        self._arm_batch_wakeup()

    def _on_batch_start(self, job, t: float) -> None:
        worker_id = job.spec.worker_config["worker_id"]
        if worker_id not in self.state.workers:
            return  # cancelled before it started
        self.sim_workers[worker_id] = _SimWorker(
            worker_id=worker_id, handle=job.handle, n_cores=job.spec.n_cores
        )
        self.state.worker_arrived(worker_id, "sim", t, n_cores=job.spec.n_cores)
        self._dispatch(t)

    # ---- failure injection --------------------------------------------------

    def kill_worker_at(self, worker_id: str, t: float) -> None:
        self._kill_plan.append((t, worker_id))

    def _kill(self, worker_id: str, now: float) -> None:
        sw = self.sim_workers.get(worker_id)
        if sw is None or not sw.alive:
            return
        sw.alive = False  # heartbeats stop; the scheduler reaps it after the timeout
        if sw.handle is not None:
            self.batch.finish(sw.handle, now)
        log.info("killed worker %s at t=%s", worker_id, now)

    # ---- task execution ------------------------------------------------------

    def _dispatch(self, now: float) -> None:
        for worker_id, spec in self.state.schedule_step(now):
            sw = self.sim_workers[worker_id]
            sw.pending.append(spec)
            self._maybe_start_next(sw, now)

    def _maybe_start_next(self, sw: _SimWorker, now: float) -> None:
        if sw.busy or not sw.alive or not sw.pending:
            return
        spec = sw.pending.popleft()
        sw.busy = True
        duration = spec.chunk.len / self.params.rate
        self.loop.schedule(duration, lambda: self._complete(sw, spec, now))

    def _complete(self, sw: _SimWorker, spec: TaskSpec, started: float) -> None:
        now = self.loop.now
        sw.busy = False
        if not sw.alive:
            return
        job = self.state.jobs.get(spec.job_id)
        if job is None or job.assigned.get(spec.chunk.chunk_id) != sw.worker_id:
            return  # reassigned while this event was in flight
        result = self._execute(spec, sw.worker_id, started, now)
        self.state.complete_task(sw.worker_id, spec.job_id, spec.chunk.chunk_id, result, now)
        self._maybe_start_next(sw, now)
        self._dispatch(now)

    def _execute(self, spec: TaskSpec, worker_id: str, t_start: float, t_end: float):
        pipeline = self._pipelines[spec.job_id]
        target = rewrite_url(spec.chunk.file, ("sim", 0), self.data_token)
        if target.proxy is None:
            reader = cacf.local_range_reader(target.path)
        else:
            reader = self.proxy.range_reader(target.path, target.token)
        batch = cacf.read_chunk(reader, spec.chunk, sorted(pipeline.input_columns()))
        result = run_pipeline(batch, pipeline, chunk_id=spec.chunk.chunk_id, worker_id=worker_id)
        result.t_start = t_start
        result.t_end = t_end
        return result

    # ---- driving --------------------------------------------------------------

    def _tick(self) -> None:
        now = self.loop.now
        for worker_id, sw in sorted(self.sim_workers.items()):
            if sw.alive and worker_id in self.state.workers:
                self.state.heartbeat(worker_id, now)
        self.state.reap_lost_workers(now, self.params.heartbeat_timeout)
        self.autoscaler.tick(now)
        self._dispatch(now)
        if self.state.unfinished_jobs():
            self.loop.schedule(self.params.tick, self._tick)

    def run_job(
        self,
        pipeline_json: list,
        dataset: DatasetSpec,
        chunk_size: int,
        events_per_file: list[int],
        max_time: float = 1e6,
    ):
        """Submit one job at t=0 and run the facility until it settles."""
        job_id = self.state.submit_job(
            pipeline_json, dataset, chunk_size, now=self.loop.now, events_per_file=events_per_file
        )
        self._pipelines[job_id] = self.state.jobs[job_id].pipeline
        for t, worker_id in sorted(self._kill_plan):
            self.loop.schedule_at(t, lambda w=worker_id: self._kill(w, self.loop.now))
        self.loop.schedule_at(self.loop.now, self._tick)
        self.loop.run(max_time=max_time)
        return self.state.jobs[job_id]
