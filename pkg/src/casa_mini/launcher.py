"""Facility composition root.

One process starts every shared service: the identity broker, the SNI
ingress, the batch system, and the data proxy with its federation origin.
A successful login provisions that user's cluster: a dedicated scheduler
behind mutual TLS, a warm 8-core worker already registered (first results
without touching the batch system), and an ingress route so the cluster is
reachable at <cluster-id>.<facility-domain> on the shared address.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import secrets
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

from . import authd
from .batchsim import BatchService, BatchSim, DelayModel, JobSpec
from .client import BatchClient
from .data_proxy import DataProxyServer, OriginServer
from .ingress import SniProxy
from .scheduler.service import SchedulerService, server_ssl_context
from .scheduler.state import ScalePolicy

log = logging.getLogger(__name__)

DEDICATED_CORES = 8
BATCH_CORES = 4


@dataclass
class FacilityConfig:
    bind: str = "127.0.0.1"
    facility_domain: str = "dask.local"
    ports: dict = field(
        default_factory=lambda: {
            "ingress": 0,
            "ingress_admin": 0,
            "authd": 0,
            "batch": 0,
            "data_proxy": 0,
            "origin": 0,
        }
    )
    scheduler_base_port: int = 8801  # 0 -> ephemeral ports
    idp_public_key_pem: str = ""
    required_group: str = "cms"
    token_ttl: float = 3600.0
    slot_pool: int = 200
    delay_model: dict = field(default_factory=lambda: {"s0": 2.0, "c": 1.0, "jitter": 0.0, "seed": 1})
    data_root: str = "data"
    run_dir: str = ""
    dedicated_cores: int = DEDICATED_CORES
    worker_cores: int = BATCH_CORES
    heartbeat_timeout: float = 10.0

    @classmethod
    def load(cls, path: str) -> "FacilityConfig":
        with open(path) as fh:
            raw = json.load(fh)
        if "idp_public_key_path" in raw:
            with open(raw.pop("idp_public_key_path")) as fh:
                raw["idp_public_key_pem"] = fh.read()
        cfg = cls()
        for key, value in raw.items():
            if hasattr(cfg, key):
                setattr(cfg, key, value)
        return cfg


@dataclass
class ClusterRecord:
    cluster_id: str
    subject: str
    sni_hostname: str
    scheduler_addr: tuple[str, int]
    service: SchedulerService
    dedicated_worker: subprocess.Popen | None
    created_at: float
    cred_dir: str


class Facility:
    def __init__(self, cfg: FacilityConfig):
        if not cfg.idp_public_key_pem:
            raise ValueError("facility config needs the identity provider public key")
        self.cfg = cfg
        self.run_dir = cfg.run_dir or tempfile.mkdtemp(prefix="casa-mini-")
        self.keys = authd.FacilityKeys.generate()
        self.federation_cred = secrets.token_hex(16)
        self.auth = authd.AuthService(
            cfg.idp_public_key_pem,
            keys=self.keys,
            required_group=cfg.required_group,
            token_ttl=cfg.token_ttl,
            facility_domain=cfg.facility_domain,
        )
        self.origin = OriginServer(cfg.data_root, self.federation_cred)
        self.batch_sim = BatchSim(
            delay=DelayModel(**cfg.delay_model),
            slots=cfg.slot_pool,
            batch_key=self.keys.batch,
            on_start=self._start_batch_worker,
            on_stop=self._stop_batch_worker,
        )
        self.batch_service = BatchService(self.batch_sim, clock=time.time)
        self.sni = SniProxy()
        self.proxy: DataProxyServer | None = None
        self.clusters: dict[str, ClusterRecord] = {}
        self.addresses: dict[str, tuple[str, int]] = {}
        self._authd_server: asyncio.AbstractServer | None = None
        self._batch_procs: dict[int, subprocess.Popen] = {}
        self._provision_lock = asyncio.Lock()
        self._next_sched_port = cfg.scheduler_base_port

    # ---- lifecycle -----------------------------------------------------------

    async def start(self) -> dict:
        bind = self.cfg.bind
        os.makedirs(self.run_dir, exist_ok=True)
        self.addresses["origin"] = await self.origin.start(bind, self.cfg.ports.get("origin", 0))
        self.proxy = DataProxyServer(
            self.addresses["origin"], self.federation_cred, self.keys.data
        )
        self.addresses["data_proxy"] = await self.proxy.start(bind, self.cfg.ports.get("data_proxy", 0))
        self.addresses["batch"] = await self.batch_service.start(bind, self.cfg.ports.get("batch", 0))
        self.addresses["ingress"] = await self.sni.start(bind, self.cfg.ports.get("ingress", 0))
        self.addresses["ingress_admin"] = await self.sni.start_admin(
            bind, self.cfg.ports.get("ingress_admin", 0)
        )
        self._authd_server = await authd.serve(
            self.auth, bind, self.cfg.ports.get("authd", 0), on_login=self._on_login
        )
        self.addresses["authd"] = self._authd_server.sockets[0].getsockname()[:2]
        log.info("facility up: %s", {k: list(v) for k, v in self.addresses.items()})
        return dict(self.addresses)

    async def stop(self) -> None:
        for cluster_id in list(self.clusters):
            try:
                await self.teardown_cluster(cluster_id)
            except Exception as exc:
                log.warning("teardown of %s during stop failed: %s", cluster_id, exc)
        for proc in list(self._batch_procs.values()):
            proc.terminate()
        self._batch_procs.clear()
        await self.batch_service.close()
        await self.sni.close()
        if self.proxy is not None:
            await self.proxy.close()
        await self.origin.close()
        if self._authd_server is not None:
            self._authd_server.close()
            await self._authd_server.wait_closed()

    # ---- batch worker processes -------------------------------------------------

    def _start_batch_worker(self, job, now: float) -> None:
        config_path = os.path.join(self.run_dir, f"batch-job-{job.handle}.json")
        with open(config_path, "w") as fh:
            json.dump(job.spec.worker_config, fh)
        proc = subprocess.Popen(
            [sys.executable, "-m", "casa_mini.worker", config_path],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        self._batch_procs[job.handle] = proc
        log.info("batch job %d started worker pid %d", job.handle, proc.pid)

    def _stop_batch_worker(self, job, now: float) -> None:
        proc = self._batch_procs.pop(job.handle, None)
        if proc is not None:
            proc.terminate()

    # ---- provisioning --------------------------------------------------------------

    async def _on_login(self, bundle: authd.CredentialBundle) -> dict:
        record = await self.provision_cluster(bundle)
        return {
            "ingress": list(self.addresses["ingress"]),
            "data_proxy": list(self.addresses["data_proxy"]),
            "sni_hostname": record.sni_hostname,
        }

    def _write_creds(self, bundle: authd.CredentialBundle) -> str:
        cred_dir = os.path.join(self.run_dir, "clusters", bundle.cluster_id)
        os.makedirs(cred_dir, exist_ok=True)
        for name, text in (
            ("ca.pem", bundle.ca.cert_pem),
            ("host-cert.pem", bundle.host.cert_pem),
            ("host-key.pem", bundle.host.key_pem),
            ("user-cert.pem", bundle.user.cert_pem),
            ("user-key.pem", bundle.user.key_pem),
        ):
            with open(os.path.join(cred_dir, name), "w") as fh:
                fh.write(text)
        return cred_dir

    def _worker_config(
        self, bundle: authd.CredentialBundle, cred_dir: str, worker_id: str | None, n_cores: int
    ) -> dict:
        return {
            "worker_id": worker_id,
            "ingress": list(self.addresses["ingress"]),
            "sni": bundle.sni_hostname,
            "ca": os.path.join(cred_dir, "ca.pem"),
            "cert": os.path.join(cred_dir, "user-cert.pem"),
            "key": os.path.join(cred_dir, "user-key.pem"),
            "proxy": list(self.addresses["data_proxy"]),
            "data_token": bundle.data_token,
            "n_cores": n_cores,
        }

    async def provision_cluster(self, bundle: authd.CredentialBundle) -> ClusterRecord:
        async with self._provision_lock:
            existing = self.clusters.get(bundle.cluster_id)
            if existing is not None:
                return existing
            cred_dir = self._write_creds(bundle)
            batch_client = BatchClient(self.addresses["batch"])

            async def scale_submit(worker_id: str, n_cores: int) -> int:
                spec = JobSpec(
                    n_cores=n_cores,
                    worker_config=self._worker_config(bundle, cred_dir, worker_id, n_cores),
                    batch_token=bundle.batch_token,
                )
                return await batch_client.submit(spec)

            async def scale_cancel(handle: int) -> None:
                await batch_client.cancel(handle)

            service = SchedulerService(
                bundle.cluster_id,
                policy=ScalePolicy(mode="fixed", fixed_n=0),
                scale_submit=scale_submit,
                scale_cancel=scale_cancel,
                worker_cores=self.cfg.worker_cores,
                heartbeat_timeout=self.cfg.heartbeat_timeout,
            )
            ssl_ctx = server_ssl_context(
                os.path.join(cred_dir, "host-cert.pem"),
                os.path.join(cred_dir, "host-key.pem"),
                os.path.join(cred_dir, "ca.pem"),
            )
            port = 0
            if self._next_sched_port:
                port = self._next_sched_port
                self._next_sched_port += 1
            sched_addr = await service.start(self.cfg.bind, port, ssl_ctx)
            self.sni.routes.register(bundle.sni_hostname, sched_addr)

            dedicated = await self._spawn_dedicated_worker(bundle, cred_dir, service)
            record = ClusterRecord(
                cluster_id=bundle.cluster_id,
                subject=bundle.subject,
                sni_hostname=bundle.sni_hostname,
                scheduler_addr=sched_addr,
                service=service,
                dedicated_worker=dedicated,
                created_at=time.time(),
                cred_dir=cred_dir,
            )
            self.clusters[bundle.cluster_id] = record
            log.info(
                "provisioned cluster %s for %s at %s (route %s)",
                bundle.cluster_id,
                bundle.subject,
                sched_addr,
                bundle.sni_hostname,
            )
            return record

    async def _spawn_dedicated_worker(
        self, bundle: authd.CredentialBundle, cred_dir: str, service: SchedulerService
    ) -> subprocess.Popen:
        worker_id = f"{bundle.cluster_id}-dedicated"
        config = self._worker_config(bundle, cred_dir, worker_id, self.cfg.dedicated_cores)
        config_path = os.path.join(cred_dir, "dedicated-worker.json")
        with open(config_path, "w") as fh:
            json.dump(config, fh)
        proc = subprocess.Popen(
            [sys.executable, "-m", "casa_mini.worker", config_path],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + 15.0
        while time.monotonic() < deadline:
            w = service.state.workers.get(worker_id)
            if w is not None and w.arrived:
                return proc
            await asyncio.sleep(0.05)
        proc.terminate()
        raise RuntimeError(f"dedicated worker for {bundle.cluster_id} did not register")

    async def teardown_cluster(self, cluster_id: str) -> dict:
        record = self.clusters.pop(cluster_id, None)
        if record is None:
            raise KeyError(f"unknown cluster {cluster_id!r}")
        await record.service.cancel_all_batch_workers()
        for job in record.service.state.jobs.values():
            if job.state == "running":
                job.failed |= job.queued | set(job.assigned)
                job.queued.clear()
                job.assigned.clear()
        try:
            self.sni.routes.remove(record.sni_hostname)
        except Exception:
            pass
        await record.service.close()
        if record.dedicated_worker is not None:
            record.dedicated_worker.terminate()
        log.info("cluster %s torn down", cluster_id)
        return {"cluster_id": cluster_id, "state": "removed"}


async def run_facility(config_path: str) -> None:
    """`casa-mini facility up`: run until interrupted."""
    cfg = FacilityConfig.load(config_path)
    facility = Facility(cfg)
    addresses = await facility.start()
    print(json.dumps({k: list(v) for k, v in addresses.items()}, indent=1), flush=True)
    try:
        while True:
            await asyncio.sleep(3600)
    except (KeyboardInterrupt, asyncio.CancelledError):
        pass
    finally:
        await facility.stop()
