"""HTCondor-like batch system, simulated.

Worker jobs are admitted against a slot pool and start after a seeded delay:
the k-th submission of a wave (submissions landing in the same autoscale
tick) starts s0 + c*k after it arrived, so scale-up bursts stagger — the
linear-in-wave-index stall the benchmark measures.  The discrete-event core
is clock-agnostic: submit() schedules transitions, advance(to) fires them;
the network service drives it from wall time, the virtual facility from its
event loop.
"""

from __future__ import annotations

import asyncio
import csv
import io
import logging
import math
import random
from dataclasses import dataclass, field

from . import tokens, wire

log = logging.getLogger(__name__)

QUEUED = "Queued"
STARTING = "Starting"
RUNNING = "Running"
CANCELLED = "Cancelled"
DONE = "Done"

DEFAULT_SLOTS = 200
WAVE_WINDOW = 1.0  # one autoscale evaluation tick


class BatchError(ValueError):
    pass


@dataclass
class DelayModel:
    s0: float = 2.0
    c: float = 1.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.s0 < 0 or self.c < 0:
            raise BatchError("delays must be non-negative")


@dataclass
class JobSpec:
    image: str = "casa-mini-worker:latest"
    n_cores: int = 4
    memory_gb: float = 6.0
    open_ports: list = field(default_factory=list)
    worker_config: dict = field(default_factory=dict)
    batch_token: str = ""

    def __post_init__(self):
        if self.n_cores <= 0 or self.memory_gb <= 0:
            raise BatchError("n_cores and memory_gb must be positive")

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "n_cores": self.n_cores,
            "memory_gb": self.memory_gb,
            "open_ports": list(self.open_ports),
            "worker_config": dict(self.worker_config),
            "batch_token": self.batch_token,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobSpec":
        return cls(
            image=d.get("image", "casa-mini-worker:latest"),
            n_cores=int(d.get("n_cores", 4)),
            memory_gb=float(d.get("memory_gb", 6.0)),
            open_ports=list(d.get("open_ports", [])),
            worker_config=dict(d.get("worker_config", {})),
            batch_token=d.get("batch_token", ""),
        )


@dataclass
class Transition:
    handle: int
    frm: str
    to: str
    t: float


@dataclass
class BatchJob:
    handle: int
    spec: JobSpec
    state: str
    submitted_at: float
    start_at: float | None = None
    started_at: float | None = None
    ended_at: float | None = None


def transitions_to_csv(transitions: list[Transition]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["handle", "from", "to", "t"])
    for tr in transitions:
        writer.writerow([tr.handle, tr.frm, tr.to, repr(tr.t)])
    return out.getvalue()


class BatchSim:
    """Deterministic discrete-event core; single-threaded by construction."""

    def __init__(
        self,
        delay: DelayModel | None = None,
        slots: int = DEFAULT_SLOTS,
        batch_key: bytes | None = None,
        on_start=None,
        on_stop=None,
    ):
        self.delay = delay or DelayModel()
        self.total_slots = slots
        self.batch_key = batch_key
        self.on_start = on_start  # fn(job, now)
        self.on_stop = on_stop  # fn(job, now)
        self.jobs: dict[int, BatchJob] = {}
        self.transitions: list[Transition] = []
        self.clock = 0.0
        self._next_handle = 0
        self._rng = random.Random(self.delay.seed)
        self._wave_key: int | None = None
        self._wave_count = 0
        self._waiting: list[int] = []  # queued handles, FIFO

    # ---- slot accounting ---------------------------------------------------

    @property
    def in_use(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state == RUNNING)

    @property
    def committed(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state in (STARTING, RUNNING))

    # ---- operations --------------------------------------------------------

    def submit(self, spec: JobSpec, now: float) -> int:
        if self.batch_key is not None:
            tokens.verify_token(spec.batch_token, self.batch_key, "batch", now)
        self.clock = max(self.clock, now)
        self._next_handle += 1
        handle = self._next_handle
        job = BatchJob(handle=handle, spec=spec, state=QUEUED, submitted_at=now)
        self.jobs[handle] = job
        self._log(handle, "", QUEUED, now)
        if self.committed < self.total_slots:
            self._schedule_start(job, now)
        else:
            self._waiting.append(handle)
        return handle

    def _schedule_start(self, job: BatchJob, now: float) -> None:
        wave_key = math.floor(now / WAVE_WINDOW)
        if wave_key != self._wave_key:
            self._wave_key = wave_key
            self._wave_count = 0
        self._wave_count += 1
        delay = self.delay.s0 + self.delay.c * self._wave_count
        if self.delay.jitter:
            delay *= 1.0 + self.delay.jitter * self._rng.uniform(-1.0, 1.0)
        job.state = STARTING
        job.start_at = now + delay
        self._log(job.handle, QUEUED, STARTING, now)

    def next_event_time(self) -> float | None:
        starts = [j.start_at for j in self.jobs.values() if j.state == STARTING]
        return min(starts) if starts else None

    def advance(self, to: float) -> list[Transition]:
        """Fire every transition scheduled up to `to`, in time order."""
        if to < self.clock:
            raise BatchError(f"time cannot move backwards ({to} < {self.clock})")
        fired: list[Transition] = []
        while True:
            due = [
                j
                for j in self.jobs.values()
                if j.state == STARTING and j.start_at is not None and j.start_at <= to
            ]
            if not due:
                break
            job = min(due, key=lambda j: (j.start_at, j.handle))
            self.clock = max(self.clock, job.start_at)
            job.state = RUNNING
            job.started_at = job.start_at
            tr = self._log(job.handle, STARTING, RUNNING, job.start_at)
            fired.append(tr)
            if self.on_start is not None:
                self.on_start(job, job.start_at)
        self.clock = max(self.clock, to)
        return fired

    def cancel(self, handle: int, now: float) -> str:
        job = self.jobs.get(handle)
        if job is None:
            raise BatchError(f"unknown job handle {handle}")
        self.clock = max(self.clock, now)
        if job.state in (CANCELLED, DONE):
            return job.state  # idempotent
        prev = job.state
        job.state = CANCELLED
        job.ended_at = now
        job.start_at = None
        if handle in self._waiting:
            self._waiting.remove(handle)
        self._log(handle, prev, CANCELLED, now)
        if prev == RUNNING and self.on_stop is not None:
            self.on_stop(job, now)
        if prev in (RUNNING, STARTING):
            self._promote_waiting(now)
        return job.state

    def finish(self, handle: int, now: float) -> str:
        """A running worker exited on its own (shutdown or crash)."""
        job = self.jobs.get(handle)
        if job is None:
            raise BatchError(f"unknown job handle {handle}")
        if job.state != RUNNING:
            return job.state
        job.state = DONE
        job.ended_at = now
        self._log(handle, RUNNING, DONE, now)
        self._promote_waiting(now)
        return job.state

    def _promote_waiting(self, now: float) -> None:
        while self._waiting and self.committed < self.total_slots:
            handle = self._waiting.pop(0)
            self._schedule_start(self.jobs[handle], now)

    def _log(self, handle: int, frm: str, to: str, t: float) -> Transition:
        tr = Transition(handle=handle, frm=frm, to=to, t=t)
        self.transitions.append(tr)
        return tr


class BatchService:
    """Framed-JSON front end driving a BatchSim from wall time."""

    def __init__(self, sim: BatchSim, clock):
        self.sim = sim
        self.clock = clock
        self._server: asyncio.AbstractServer | None = None
        self._pump: asyncio.Task | None = None

    async def start(self, host: str, port: int) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        self._pump = asyncio.create_task(self._advance_loop())
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def close(self) -> None:
        if self._pump is not None:
            self._pump.cancel()
            try:
                await self._pump
            except asyncio.CancelledError:
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _advance_loop(self) -> None:
        while True:
            self.sim.advance(self.clock())
            await asyncio.sleep(0.05)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    msg = await wire.read_message(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                now = self.clock()
                try:
                    if msg.kind == "SubmitJob":
                        handle = self.sim.submit(JobSpec.from_dict(msg.body), now)
                        await wire.send_message(writer, wire.ok({"handle": handle}))
                    elif msg.kind == "Cancel":
                        state = self.sim.cancel(int(msg.body["handle"]), now)
                        await wire.send_message(writer, wire.ok({"state": state}))
                    elif msg.kind == "JobStatus":
                        job = self.sim.jobs.get(int(msg.body["handle"]))
                        if job is None:
                            raise BatchError("unknown job handle")
                        await wire.send_message(
                            writer, wire.ok({"state": job.state, "start_at": job.start_at})
                        )
                    else:
                        await wire.send_message(writer, wire.err("bad_request", f"unsupported kind {msg.kind}"))
                except tokens.TokenError as exc:
                    await wire.send_message(writer, wire.err("bad_token", str(exc)))
                except (BatchError, KeyError, TypeError, ValueError) as exc:
                    await wire.send_message(writer, wire.err("batch_error", str(exc)))
        except wire.WireError as exc:
            log.warning("batch: closing connection: %s", exc)
        finally:
            writer.close()
