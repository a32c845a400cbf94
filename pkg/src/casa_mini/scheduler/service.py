"""Networked scheduler: the ClusterState behind mutual TLS.

One asyncio event loop owns all state mutation; connection handlers never
touch the state concurrently.  Workers and clients both connect to the same
port (normally through the SNI ingress) with certificates minted by the
cluster CA; the peer certificate's CN is the caller identity.
"""

from __future__ import annotations

import asyncio
import logging
import ssl
import time

from .. import wire
from ..engine.pipeline import TaskResult
from ..types import DatasetSpec
from .state import (
    AUTOSCALE_INTERVAL,
    DEFAULT_CORES,
    HEARTBEAT_TIMEOUT,
    Autoscaler,
    ClusterState,
    ScalePolicy,
    SchedulerError,
    events_to_csv,
)

log = logging.getLogger(__name__)


def server_ssl_context(host_cert_path: str, host_key_path: str, ca_path: str) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.load_cert_chain(host_cert_path, host_key_path)
    ctx.load_verify_locations(ca_path)
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_ssl_context(ca_path: str, cert_path: str, key_path: str) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.load_verify_locations(ca_path)
    ctx.load_cert_chain(cert_path, key_path)
    return ctx


def _peer_cn(writer: asyncio.StreamWriter) -> str:
    cert = writer.get_extra_info("peercert") or {}
    for rdn in cert.get("subject", ()):
        for key, value in rdn:
            if key == "commonName":
                return value
    return ""


class SchedulerService:
    """TLS front end over ClusterState plus the batch scale-out adapter."""

    def __init__(
        self,
        cluster_id: str,
        policy: ScalePolicy | None = None,
        scale_submit=None,  # async (worker_id, n_cores) -> batch handle
        scale_cancel=None,  # async (handle) -> None
        clock=time.time,
        worker_cores: int = DEFAULT_CORES,
        heartbeat_timeout: float = HEARTBEAT_TIMEOUT,
    ):
        self.state = ClusterState(cluster_id)
        self.policy = policy or ScalePolicy(mode="fixed", fixed_n=0)
        self.scale_submit = scale_submit
        self.scale_cancel = scale_cancel
        self.clock = clock
        self.worker_cores = worker_cores
        self.heartbeat_timeout = heartbeat_timeout
        self.autoscaler = Autoscaler(self.state, self.policy, self._request_workers, self._cancel_worker)
        self._worker_conns: dict[str, asyncio.StreamWriter] = {}
        self._send_locks: dict[str, asyncio.Lock] = {}
        self._server: asyncio.AbstractServer | None = None
        self._ticker: asyncio.Task | None = None
        self._done_events: dict[str, asyncio.Event] = {}

    # ---- lifecycle ---------------------------------------------------------

    async def start(self, host: str, port: int, ssl_context: ssl.SSLContext) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port, ssl=ssl_context)
        self._ticker = asyncio.create_task(self._tick_loop())
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def close(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()
            try:
                await self._ticker
            except asyncio.CancelledError:
                pass
        for writer in list(self._worker_conns.values()):
            writer.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def cancel_all_batch_workers(self) -> None:
        for worker_id, w in list(self.state.workers.items()):
            if w.batch_handle is not None and self.scale_cancel is not None:
                try:
                    await self.scale_cancel(w.batch_handle)
                except Exception as exc:
                    log.warning("cancel of batch job %s failed: %s", w.batch_handle, exc)

    # ---- autoscale plumbing --------------------------------------------------

    def _request_workers(self, count: int, now: float) -> None:
        if self.scale_submit is None:
            return
        for _ in range(count):
            worker_id = self.state.next_worker_id()
            self.state.expect_worker(now, n_cores=self.worker_cores, worker_id=worker_id)
            asyncio.create_task(self._submit_one(worker_id))

    async def _submit_one(self, worker_id: str) -> None:
        try:
            handle = await self.scale_submit(worker_id, self.worker_cores)
            w = self.state.workers.get(worker_id)
            if w is not None:
                w.batch_handle = handle
        except Exception as exc:
            log.warning("batch submit for %s failed: %s", worker_id, exc)
            self.state.remove_worker(worker_id, self.clock(), f"batch submit failed: {exc}")

    def _cancel_worker(self, worker_id: str, now: float) -> None:
        w = self.state.workers.get(worker_id)
        handle = w.batch_handle if w is not None else None
        self.state.remove_worker(worker_id, now, "scaled down")
        conn = self._worker_conns.pop(worker_id, None)
        if conn is not None:
            conn.close()
        if handle is not None and self.scale_cancel is not None:
            asyncio.create_task(self._cancel_handle(handle))

    async def _cancel_handle(self, handle) -> None:
        try:
            await self.scale_cancel(handle)
        except Exception as exc:
            log.warning("batch cancel %s failed: %s", handle, exc)

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(AUTOSCALE_INTERVAL)
            now = self.clock()
            lost = self.state.reap_lost_workers(now, self.heartbeat_timeout)
            if lost:
                log.info("requeued %d chunks from lost workers", len(lost))
            self.autoscaler.tick(now)
            await self._dispatch(now)
            self._signal_done()

    # ---- dispatch -------------------------------------------------------------

    async def _dispatch(self, now: float) -> None:
        for worker_id, spec in self.state.schedule_step(now):
            writer = self._worker_conns.get(worker_id)
            if writer is None:
                continue
            try:
                async with self._send_locks[worker_id]:
                    await wire.send_message(
                        writer, wire.WireMessage("AssignTask", spec.to_dict())
                    )
            except (ConnectionError, RuntimeError) as exc:
                log.warning("assign to %s failed: %s", worker_id, exc)

    def _signal_done(self) -> None:
        for job_id, event in self._done_events.items():
            job = self.state.jobs.get(job_id)
            if job is not None and job.state != "running":
                event.set()

    async def wait_job(self, job_id: str, timeout: float = 60.0) -> dict:
        event = self._done_events.setdefault(job_id, asyncio.Event())
        await asyncio.wait_for(event.wait(), timeout)
        return self.state.jobs[job_id].status()

    # ---- connection handling -----------------------------------------------------

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        identity = _peer_cn(writer)
        worker_id: str | None = None
        try:
            while True:
                try:
                    msg = await wire.read_message(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                now = self.clock()
                try:
                    reply = await self._one_message(msg, identity, writer, now)
                    if msg.kind == "WorkerHello":
                        worker_id = reply.body.get("worker_id", worker_id)
                    async with self._send_locks.setdefault(
                        worker_id or f"conn-{id(writer)}", asyncio.Lock()
                    ):
                        await wire.send_message(writer, reply)
                except wire.FrameTooLarge:
                    break
        except wire.WireError as exc:
            log.warning("scheduler: closing connection from %r: %s", identity, exc)
        finally:
            if worker_id is not None and self._worker_conns.get(worker_id) is writer:
                del self._worker_conns[worker_id]
            self._send_locks.pop(f"conn-{id(writer)}", None)
            writer.close()

    async def _one_message(
        self, msg: wire.WireMessage, identity: str, writer: asyncio.StreamWriter, now: float
    ) -> wire.WireMessage:
        try:
            if msg.kind == "WorkerHello":
                worker_id = self.state.worker_arrived(
                    msg.body.get("worker_id"),
                    identity,
                    now,
                    n_cores=int(msg.body.get("n_cores", self.worker_cores)),
                )
                self._worker_conns[worker_id] = writer
                self._send_locks.setdefault(worker_id, asyncio.Lock())
                asyncio.create_task(self._dispatch(now))
                return wire.ok({"worker_id": worker_id})
            if msg.kind == "Heartbeat":
                self.state.heartbeat(msg.body["worker_id"], now)
                return wire.ok()
            if msg.kind == "TaskDone":
                result = TaskResult.from_dict(msg.body["result"])
                status = self.state.complete_task(
                    msg.body["worker_id"], msg.body["job_id"], int(msg.body["chunk_id"]), result, now
                )
                asyncio.create_task(self._dispatch(now))
                self._signal_done()
                return wire.ok(status)
            if msg.kind == "TaskFailed":
                status = self.state.fail_task(
                    msg.body["worker_id"],
                    msg.body["job_id"],
                    int(msg.body["chunk_id"]),
                    msg.body.get("reason", ""),
                    now,
                )
                self._signal_done()
                return wire.ok(status)
            if msg.kind == "SubmitJob":
                ds = msg.body["dataset"]
                dataset = DatasetSpec(
                    name=ds["name"],
                    files=tuple(ds["files"]),
                    n_events_total=sum(ds["events_per_file"]),
                )
                job_id = self.state.submit_job(
                    msg.body["pipeline"],
                    dataset,
                    int(msg.body.get("chunk_size", 5000)),
                    now,
                    events_per_file=[int(x) for x in ds["events_per_file"]],
                    identity=identity,
                )
                self.autoscaler.tick(now)
                asyncio.create_task(self._dispatch(now))
                return wire.ok({"job_id": job_id})
            if msg.kind == "JobStatus":
                job = self.state.jobs.get(msg.body["job_id"])
                if job is None:
                    return wire.err("unknown_job", f"unknown job {msg.body.get('job_id')!r}")
                return wire.ok(job.status())
            if msg.kind == "ScaleRequest":
                if msg.body.get("export") == "task_stream":
                    return wire.ok({"task_stream_csv": events_to_csv(self.state.events)})
                self.policy.mode = msg.body.get("mode", self.policy.mode)
                if "fixed_n" in msg.body:
                    self.policy.fixed_n = int(msg.body["fixed_n"])
                if "tasks_per_worker" in msg.body:
                    self.policy.tasks_per_worker = int(msg.body["tasks_per_worker"])
                self.autoscaler.tick(now)
                return wire.ok({"mode": self.policy.mode, "fixed_n": self.policy.fixed_n})
            return wire.err("bad_request", f"unsupported kind {msg.kind}")
        except (SchedulerError, KeyError, TypeError, ValueError) as exc:
            return wire.err("scheduler_error", str(exc))
