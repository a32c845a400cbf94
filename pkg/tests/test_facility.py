import asyncio
import json
import os
import ssl
import subprocess
import sys
import time

import numpy as np
import pytest

from casa_mini import cacf, client
from casa_mini.bench import BenchConfig, generate_dataset
from casa_mini.engine.pipeline import KernelPipeline, run_pipeline
from casa_mini.launcher import Facility, FacilityConfig
from casa_mini.types import ColumnBatch

from .conftest import make_assertion, run_async

PIPELINE = [
    {"define": ["pt", "sqrt(px*px+py*py)"]},
    {"filter": "pt>20"},
    {"hist": ["h_pt", "pt", 30, 0, 300]},
]

FAST_DELAYS = {"s0": 0.2, "c": 0.1, "jitter": 0.0, "seed": 1}


def small_facility(idp_keys, tmp_path, **overrides):
    cfg_b = BenchConfig(n_files=2, events_per_file=200, chunk_size=50, dataset_name="mini")
    dataset, epf = generate_dataset(cfg_b, str(tmp_path))
    _, public_pem = idp_keys
    overrides.setdefault("scheduler_base_port", 0)
    cfg = FacilityConfig(
        idp_public_key_pem=public_pem,
        data_root=str(tmp_path),
        run_dir=str(tmp_path / "run"),
        delay_model=dict(FAST_DELAYS),
        heartbeat_timeout=5.0,
        **overrides,
    )
    return Facility(cfg), dataset, epf


def write_client_creds(reply: dict, directory: str) -> dict:
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name, key in (("ca.pem", "ca_cert"), ("cert.pem", "user_cert"), ("key.pem", "user_key")):
        path = os.path.join(directory, name)
        with open(path, "w") as fh:
            fh.write(reply[key])
        paths[name.split(".")[0]] = path
    return paths


def scheduler_client(reply: dict, cred_paths: dict) -> client.SchedulerClient:
    return client.SchedulerClient(
        tuple(reply["ingress"]), reply["sni_hostname"], cred_paths["ca"], cred_paths["cert"], cred_paths["key"]
    )


def oracle_histograms(dataset, root: str, pipeline_json):
    local = [f.replace("root://origin.sim//store/", os.path.join(root, "store") + "/") for f in dataset.files]
    pipeline = KernelPipeline.from_json(pipeline_json)
    wanted = sorted(pipeline.input_columns())
    cols = {n: np.concatenate([cacf.read_columns_path(p)[n] for p in local]) for n in wanted}
    return run_pipeline(ColumnBatch(cols), pipeline)


def test_login_provision_and_dedicated_worker(idp_keys, tmp_path):
    async def scenario():
        facility, dataset, epf = small_facility(idp_keys, tmp_path)
        addrs = await facility.start()
        try:
            reply = await client.login(addrs["authd"], make_assertion(idp_keys, sub="alice"))
            assert reply["cluster_id"] == "alice-1"
            assert reply["sni_hostname"] == "alice-1.dask.local"
            record = facility.clusters["alice-1"]
            assert record.subject == "alice"
            # dedicated worker is registered before login returns
            dedicated = record.service.state.workers["alice-1-dedicated"]
            assert dedicated.arrived and dedicated.n_cores == 8

            creds = write_client_creds(reply, str(tmp_path / "alice"))
            sc = scheduler_client(reply, creds)
            job_id = await sc.submit_job(PIPELINE, "mini", list(dataset.files), epf, chunk_size=50)
            status = await sc.wait_job(job_id, timeout=30)
            assert status["state"] == "done"
            # served entirely by the dedicated worker: the batch system saw nothing
            assert len(facility.batch_sim.jobs) == 0
            oracle = oracle_histograms(dataset, str(tmp_path), PIPELINE)
            assert status["histograms"][0]["counts"] == [int(c) for c in oracle.histograms[0].counts]
            assert status["n_events_pass"] == oracle.n_events_pass

            # second login: same cluster, idempotent
            again = await client.login(addrs["authd"], make_assertion(idp_keys, sub="alice"))
            assert again["cluster_id"] == "alice-1"
            assert len(facility.clusters) == 1
            sc.close()
        finally:
            await facility.stop()

    run_async(scenario())


def test_batch_scale_out_completes_job(idp_keys, tmp_path):
    async def scenario():
        facility, dataset, epf = small_facility(idp_keys, tmp_path)
        addrs = await facility.start()
        try:
            reply = await client.login(addrs["authd"], make_assertion(idp_keys, sub="alice"))
            creds = write_client_creds(reply, str(tmp_path / "alice"))
            sc = scheduler_client(reply, creds)
            await sc.scale_request(mode="fixed", fixed_n=2)
            job_id = await sc.submit_job(PIPELINE, "mini", list(dataset.files), epf, chunk_size=50)
            status = await sc.wait_job(job_id, timeout=45)
            assert status["state"] == "done"
            assert len(facility.batch_sim.jobs) >= 1  # scale-out actually used the batch system
            oracle = oracle_histograms(dataset, str(tmp_path), PIPELINE)
            assert status["histograms"][0]["counts"] == [int(c) for c in oracle.histograms[0].counts]
            await sc.scale_request(mode="fixed", fixed_n=0)
            sc.close()
        finally:
            await facility.stop()

    run_async(scenario())


def test_two_users_two_routes_and_isolation(idp_keys, tmp_path):
    async def scenario():
        facility, dataset, epf = small_facility(idp_keys, tmp_path)
        addrs = await facility.start()
        try:
            alice = await client.login(addrs["authd"], make_assertion(idp_keys, sub="alice"))
            bob = await client.login(addrs["authd"], make_assertion(idp_keys, sub="bob"))
            assert len(facility.sni.routes) == 2
            assert alice["sni_hostname"] != bob["sni_hostname"]
            assert alice["ingress"] == bob["ingress"]  # one shared address

            # bob's certs cannot reach alice's scheduler: wrong CA on both sides
            bob_creds = write_client_creds(bob, str(tmp_path / "bob"))
            imposter = client.SchedulerClient(
                tuple(alice["ingress"]),
                alice["sni_hostname"],
                bob_creds["ca"],
                bob_creds["cert"],
                bob_creds["key"],
            )
            with pytest.raises((ssl.SSLError, ConnectionError, OSError)):
                await imposter.job_status("job-0001")
        finally:
            await facility.stop()

    run_async(scenario())


def test_teardown_cluster(idp_keys, tmp_path):
    async def scenario():
        facility, dataset, epf = small_facility(idp_keys, tmp_path)
        addrs = await facility.start()
        try:
            reply = await client.login(addrs["authd"], make_assertion(idp_keys, sub="alice"))
            creds = write_client_creds(reply, str(tmp_path / "alice"))
            await facility.teardown_cluster("alice-1")
            assert len(facility.sni.routes) == 0
            # SNI connect is now closed without a backend
            sc = scheduler_client(reply, creds)
            with pytest.raises((ssl.SSLError, ConnectionError, OSError, asyncio.IncompleteReadError)):
                await sc.job_status("job-0001")
            with pytest.raises(KeyError, match="unknown cluster"):
                await facility.teardown_cluster("alice-1")
        finally:
            await facility.stop()

    run_async(scenario())


def test_worker_exits_nonzero_without_scheduler(tmp_path, idp_keys):
    # point a worker at a dead address: 3 connection attempts then exit 1
    from casa_mini import certs

    ca = certs.make_ca("dead-ca")
    user = certs.make_user_cert(ca, "alice")
    paths = {}
    for name, text in (("ca.pem", ca.cert_pem), ("cert.pem", user.cert_pem), ("key.pem", user.key_pem)):
        path = tmp_path / name
        path.write_text(text)
        paths[name.split(".")[0]] = str(path)
    config = {
        "worker_id": "w1",
        "ingress": ["127.0.0.1", 1],  # nothing listens here
        "sni": "x.dask.local",
        "ca": paths["ca"],
        "cert": paths["cert"],
        "key": paths["key"],
        "proxy": None,
        "data_token": "",
        "n_cores": 2,
    }
    config_path = tmp_path / "worker.json"
    config_path.write_text(json.dumps(config))
    proc = subprocess.run(
        [sys.executable, "-m", "casa_mini.worker", str(config_path)],
        capture_output=True,
        timeout=30,
    )
    assert proc.returncode == 1


def test_task_fails_cleanly_on_rejected_data_token(tmp_path):
    """execute_task surfaces a proxy token rejection as TokenError,
    which the agent reports as TaskFailed("data token rejected...")."""
    import numpy as np

    from casa_mini import cacf as cacf_mod
    from casa_mini.data_proxy import OriginServer, DataProxyServer
    from casa_mini.tokens import TokenError
    from casa_mini.types import FileChunk, TaskSpec
    from casa_mini.worker import WorkerConfig, execute_task

    os.makedirs(tmp_path / "store" / "d", exist_ok=True)
    cacf_mod.write_dataset_file({"pt": np.arange(100.0)}, str(tmp_path / "store" / "d" / "f.cacf"))

    async def scenario():
        origin = OriginServer(str(tmp_path), "fed")
        origin_addr = await origin.start("127.0.0.1", 0)
        proxy = DataProxyServer(origin_addr, "fed", b"k" * 32)
        proxy_addr = await proxy.start("127.0.0.1", 0)
        cfg = WorkerConfig(
            {
                "worker_id": "w1",
                "ingress": ["127.0.0.1", 1],
                "sni": "x",
                "ca": "c",
                "cert": "c",
                "key": "k",
                "proxy": list(proxy_addr),
                "data_token": "expired.token",
                "n_cores": 1,
            }
        )
        spec = TaskSpec(
            job_id="job-1",
            chunk=FileChunk(file="root://origin//store/d/f.cacf", start=0, len=50, chunk_id=0),
            pipeline=tuple(PIPELINE),
        )
        with pytest.raises(TokenError):
            await asyncio.to_thread(execute_task, spec, cfg, "w1")
        assert origin.local.fetches == 0
        await proxy.close()
        await origin.close()

    run_async(scenario())
