"""Worker agent: joins its cluster over mTLS, executes assigned tasks.

Invoked as a subprocess with one argument, the path to a JSON config (this
is the payload a batch job carries).  Chunk data is opened through the
URL-rewrite hook, so remote files are fetched from the caching proxy with
the worker's data token; task execution runs in threads, one per logical
core, while the control connection stays responsive for heartbeats.
"""

from __future__ import annotations

import asyncio
import json
import logging
import ssl
import sys
import time

from . import cacf, wire
from .data_proxy import ProxyClient, rewrite_url
from .engine.pipeline import KernelPipeline, run_pipeline
from .tokens import TokenError
from .types import TaskSpec

log = logging.getLogger(__name__)

RETRIES = 3
RETRY_DELAY = 0.5


class WorkerConfig:
    def __init__(self, raw: dict):
        self.worker_id = raw.get("worker_id")
        self.ingress = (raw["ingress"][0], int(raw["ingress"][1]))
        self.sni = raw["sni"]
        self.ca = raw["ca"]
        self.cert = raw["cert"]
        self.key = raw["key"]
        self.proxy = (raw["proxy"][0], int(raw["proxy"][1])) if raw.get("proxy") else None
        self.data_token = raw.get("data_token", "")
        self.n_cores = int(raw.get("n_cores", 4))
        self.heartbeat_interval = float(raw.get("heartbeat_interval", 2.0))
        for name in ("ca", "cert", "key"):
            if not getattr(self, name):
                raise ValueError(f"worker config missing credential {name!r}")
        if self.n_cores < 1:
            raise ValueError("n_cores must be >= 1")

    @classmethod
    def load(cls, path: str) -> "WorkerConfig":
        with open(path) as fh:
            return cls(json.load(fh))


def execute_task(spec: TaskSpec, cfg: WorkerConfig, worker_id: str):
    """Fetch the chunk (proxy or local), run the pipeline; runs in a thread."""
    pipeline = KernelPipeline.from_json(list(spec.pipeline))
    target = rewrite_url(spec.chunk.file, cfg.proxy, cfg.data_token)
    t_start = time.time()
    client = None
    try:
        if target.proxy is None:
            reader = cacf.local_range_reader(target.path)
        else:
            client = ProxyClient(target.proxy)
            reader = client.range_reader(target.path, target.token)
        batch = cacf.read_chunk(reader, spec.chunk, sorted(pipeline.input_columns()))
    finally:
        if client is not None:
            client.close()
    result = run_pipeline(batch, pipeline, chunk_id=spec.chunk.chunk_id, worker_id=worker_id)
    result.t_start = t_start
    result.t_end = time.time()
    return result


class WorkerAgent:
    def __init__(self, cfg: WorkerConfig):
        self.cfg = cfg
        self.worker_id = cfg.worker_id or ""
        self._sem = asyncio.Semaphore(cfg.n_cores)
        self._send_lock = asyncio.Lock()
        self._writer: asyncio.StreamWriter | None = None

    def _ssl_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.load_verify_locations(self.cfg.ca)
        ctx.load_cert_chain(self.cfg.cert, self.cfg.key)
        return ctx

    async def _connect(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        reader, writer = await asyncio.open_connection(
            *self.cfg.ingress, ssl=self._ssl_context(), server_hostname=self.cfg.sni
        )
        await wire.send_message(
            writer,
            wire.WireMessage("WorkerHello", {"worker_id": self.worker_id or None, "n_cores": self.cfg.n_cores}),
        )
        return reader, writer

    async def _send(self, msg: wire.WireMessage) -> None:
        async with self._send_lock:
            await wire.send_message(self._writer, msg)

    async def _heartbeat_loop(self) -> None:
        while True:
            await asyncio.sleep(self.cfg.heartbeat_interval)
            if self.worker_id:
                await self._send(wire.WireMessage("Heartbeat", {"worker_id": self.worker_id}))

    async def _run_task(self, body: dict) -> None:
        spec = TaskSpec.from_dict(body)
        async with self._sem:
            try:
                result = await asyncio.to_thread(execute_task, spec, self.cfg, self.worker_id)
            except TokenError as exc:
                await self._send(
                    wire.WireMessage(
                        "TaskFailed",
                        {
                            "worker_id": self.worker_id,
                            "job_id": spec.job_id,
                            "chunk_id": spec.chunk.chunk_id,
                            "reason": f"data token rejected: {exc}",
                        },
                    )
                )
                return
            except Exception as exc:
                await self._send(
                    wire.WireMessage(
                        "TaskFailed",
                        {
                            "worker_id": self.worker_id,
                            "job_id": spec.job_id,
                            "chunk_id": spec.chunk.chunk_id,
                            "reason": str(exc),
                        },
                    )
                )
                return
        await self._send(
            wire.WireMessage(
                "TaskDone",
                {
                    "worker_id": self.worker_id,
                    "job_id": spec.job_id,
                    "chunk_id": spec.chunk.chunk_id,
                    "result": result.to_dict(),
                },
            )
        )

    async def _session(self, reader: asyncio.StreamReader) -> None:
        heartbeat = asyncio.create_task(self._heartbeat_loop())
        try:
            while True:
                msg = await wire.read_message(reader)
                if msg.kind == "Ok" and "worker_id" in msg.body and not self.worker_id:
                    self.worker_id = msg.body["worker_id"]
                elif msg.kind == "AssignTask":
                    asyncio.create_task(self._run_task(msg.body))
                elif msg.kind == "Err":
                    log.warning("scheduler error: %s", msg.body)
        finally:
            heartbeat.cancel()

    async def run(self) -> int:
        while True:
            conn = None
            for attempt in range(1, RETRIES + 1):
                try:
                    conn = await self._connect()
                    break
                except (ConnectionError, OSError, ssl.SSLError) as exc:
                    log.warning("connect attempt %d/%d failed: %s", attempt, RETRIES, exc)
                    await asyncio.sleep(RETRY_DELAY)
            if conn is None:
                log.error("giving up after %d connection attempts", RETRIES)
                return 1
            reader, writer = conn
            self._writer = writer
            try:
                await self._session(reader)
            except (asyncio.IncompleteReadError, ConnectionError, ssl.SSLError) as exc:
                log.warning("scheduler connection lost: %s; reconnecting", exc)
                await asyncio.sleep(RETRY_DELAY)
            finally:
                writer.close()


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m casa_mini.worker <config.json>", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(asctime)s worker %(message)s")
    cfg = WorkerConfig.load(argv[0])
    return asyncio.run(WorkerAgent(cfg).run())


if __name__ == "__main__":
    sys.exit(main())
