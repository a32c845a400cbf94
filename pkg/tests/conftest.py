from __future__ import annotations

import asyncio
import os
import time

import pytest

from casa_mini import authd
from casa_mini.bench import BenchConfig, make_context


@pytest.fixture(scope="session")
def idp_keys() -> tuple[str, str]:
    return authd.generate_idp_keypair()


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory) -> str:
    return str(tmp_path_factory.mktemp("bench-data"))


@pytest.fixture(scope="session")
def bench_cfg() -> BenchConfig:
    return BenchConfig()


@pytest.fixture(scope="session")
def bench_ctx(bench_cfg, bench_root):
    return make_context(bench_cfg, bench_root)


def make_assertion(idp_keys, sub="alice", groups=("cms",), ttl=600.0) -> dict:
    private_pem, _ = idp_keys
    now = time.time()
    return authd.sign_assertion(private_pem, sub, list(groups), now, now + ttl)


def run_async(coro, timeout: float = 120.0):
    async def wrapped():
        return await asyncio.wait_for(coro, timeout)

    return asyncio.run(wrapped())


@pytest.fixture()
def anyio_run():
    return run_async


def local_files_for(ctx, root: str) -> list[str]:
    return [f.replace("root://origin.sim//store/", os.path.join(root, "store") + "/") for f in ctx.dataset.files]
