"""Token-authenticated caching data proxy and simulated federation origin.

The proxy fetches 64 KiB blocks on demand from an origin server using its own
federation credential (users never hold one), caches them, and serves byte
ranges to anyone presenting a valid data token.  Per-block single-flight
coordination means concurrent cold reads cause exactly one origin fetch.

Wire formats
  proxy listener:  WireMessage {kind:"Fetch", body:{path, offset, length, token}}
                   reply: length-prefixed block, first byte a status tag
  origin listener: length-prefixed JSON {path, offset, length, cred}
                   reply: length-prefixed block, first byte a status tag
"""

from __future__ import annotations

import asyncio
import hashlib
import hmac
import json
import logging
import os
import socket
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass

from . import tokens, wire

log = logging.getLogger(__name__)

BLOCK_SIZE = 64 * 1024
MAX_FETCH = 16 * 1024 * 1024

TAG_OK = 0
TAG_NOT_FOUND = 1
TAG_BAD_CRED = 2
TAG_ERROR = 3
TAG_BAD_TOKEN = 4

_LEN = struct.Struct(">I")


class ProxyError(ValueError):
    pass


class OriginNotFound(ProxyError):
    pass


class BadFederationCred(ProxyError):
    pass


@dataclass(frozen=True)
class RemoteUrl:
    host: str
    path: str  # begins with /store/


def parse_remote_url(url: str) -> RemoteUrl | None:
    """Parse root://host//store/... ; None for local paths (no scheme)."""
    if "://" not in url:
        return None
    scheme, rest = url.split("://", 1)
    if scheme != "root":
        raise ProxyError(f"unsupported scheme {scheme!r}")
    host, sep, path = rest.partition("//")
    if not sep or not host:
        raise ProxyError(f"malformed remote url {url!r} (need root://host//store/...)")
    path = "/" + path
    if not path.startswith("/store/"):
        raise ProxyError(f"remote path must begin with /store/, got {path!r}")
    return RemoteUrl(host=host, path=path)


@dataclass(frozen=True)
class FetchTarget:
    """Where a worker's open goes after the rewrite hook."""

    proxy: tuple[str, int] | None  # None -> plain local file access
    path: str
    token: str = ""


def rewrite_url(url: str, proxy: tuple[str, int], token: str) -> FetchTarget:
    """Point a remote URL at the local proxy and attach the data token."""
    remote = parse_remote_url(url)
    if remote is None:
        return FetchTarget(proxy=None, path=url)
    return FetchTarget(proxy=proxy, path=remote.path, token=token)


@dataclass
class CacheStats:
    origin_fetches: int = 0
    cache_hits: int = 0
    bytes_served: int = 0

    def as_dict(self) -> dict:
        return {
            "origin_fetches": self.origin_fetches,
            "cache_hits": self.cache_hits,
            "bytes_served": self.bytes_served,
        }


class BlockStore:
    """(path, block index) -> bytes, with optional LRU byte cap and disk spill."""

    def __init__(
        self,
        block_size: int = BLOCK_SIZE,
        max_bytes: int | None = None,
        cache_dir: str | None = None,
    ):
        self.block_size = block_size
        self.max_bytes = max_bytes
        self.cache_dir = cache_dir
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
        self._blocks: OrderedDict[tuple[str, int], bytes] = OrderedDict()
        self._total = 0
        self.stats = CacheStats()

    def block_range(self, offset: int, length: int) -> range:
        if length <= 0:
            return range(0)
        return range(offset // self.block_size, (offset + length - 1) // self.block_size + 1)

    def _disk_path(self, path: str, idx: int) -> str:
        digest = hashlib.sha256(path.encode()).hexdigest()[:24]
        return os.path.join(self.cache_dir, f"{digest}.{idx}.blk")

    def get(self, path: str, idx: int) -> bytes | None:
        data = self._blocks.get((path, idx))
        if data is not None:
            self._blocks.move_to_end((path, idx))
            return data
        if self.cache_dir:
            disk = self._disk_path(path, idx)
            if os.path.exists(disk):
                with open(disk, "rb") as fh:
                    data = fh.read()
                self.put(path, idx, data)
                return data
        return None

    def put(self, path: str, idx: int, data: bytes) -> None:
        key = (path, idx)
        if key in self._blocks:
            return
        self._blocks[key] = data
        self._total += len(data)
        if self.cache_dir:
            disk = self._disk_path(path, idx)
            if not os.path.exists(disk):
                with open(disk, "wb") as fh:
                    fh.write(data)
        if self.max_bytes is not None:
            while self._total > self.max_bytes and len(self._blocks) > 1:
                _, evicted = self._blocks.popitem(last=False)
                self._total -= len(evicted)

    def slice_blocks(self, blocks: list[bytes], first_idx: int, offset: int, length: int) -> bytes:
        """Cut [offset, offset+length) out of contiguous blocks starting at first_idx.

        Operates on the caller's block list, not the store: under an LRU cap a
        long fetch may span more blocks than the cache retains at once.
        """
        joined = b"".join(blocks)
        rel = offset - first_idx * self.block_size if blocks else 0
        return joined[rel : rel + length]


def _check_fetch_args(offset: int, length: int) -> None:
    if offset < 0 or length < 0:
        raise ProxyError("negative offset or length")
    if length > MAX_FETCH:
        raise ProxyError(f"fetch of {length} bytes exceeds {MAX_FETCH}")


class LocalOrigin:
    """Direct file-range access under a root directory; the federation side."""

    def __init__(self, root: str, cred: str):
        self.root = os.path.abspath(root)
        self.cred = cred
        self.fetches = 0  # instrumentation for single-flight checks

    def resolve(self, path: str) -> str:
        if not path.startswith("/store/"):
            raise OriginNotFound(f"no such object {path!r}")
        full = os.path.abspath(os.path.join(self.root, path.lstrip("/")))
        if not full.startswith(self.root + os.sep):
            raise OriginNotFound(f"no such object {path!r}")
        if not os.path.isfile(full):
            raise OriginNotFound(f"no such object {path!r}")
        return full

    def fetch(self, path: str, offset: int, length: int, cred: str) -> bytes:
        if not hmac.compare_digest(cred.encode(), self.cred.encode()):
            raise BadFederationCred("bad federation credential")
        full = self.resolve(path)
        self.fetches += 1
        with open(full, "rb") as fh:
            fh.seek(offset)
            return fh.read(length)


class SyncDataProxy:
    """In-process read-through proxy; the virtual-clock facility's data path."""

    def __init__(
        self,
        origin: LocalOrigin,
        data_key: bytes,
        block_size: int = BLOCK_SIZE,
        max_bytes: int | None = None,
        clock=time.time,
    ):
        self.store = BlockStore(block_size=block_size, max_bytes=max_bytes)
        self.origin = origin
        self.data_key = data_key
        self._clock = clock

    def fetch(self, path: str, offset: int, length: int, token: str, now: float | None = None) -> bytes:
        now = self._clock() if now is None else now
        tokens.verify_token(token, self.data_key, "data", now)  # before any origin contact
        _check_fetch_args(offset, length)
        wanted = self.store.block_range(offset, length)
        blocks: list[bytes] = []
        for idx in wanted:
            data = self.store.get(path, idx)
            if data is not None:
                self.store.stats.cache_hits += 1
            else:
                data = self.origin.fetch(
                    path, idx * self.store.block_size, self.store.block_size, self.origin.cred
                )
                self.store.stats.origin_fetches += 1
                self.store.put(path, idx, data)
            blocks.append(data)
        out = self.store.slice_blocks(blocks, wanted.start, offset, length)
        self.store.stats.bytes_served += len(out)
        return out

    def stats(self) -> dict:
        return self.store.stats.as_dict()

    def range_reader(self, path: str, token: str):
        def read(offset: int, length: int) -> bytes:
            return self.fetch(path, offset, length, token)

        return read


def _tagged(tag: int, payload: bytes) -> bytes:
    return _LEN.pack(1 + len(payload)) + bytes([tag]) + payload


async def _read_block_reply(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(_LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_FETCH + 1:
        raise ProxyError(f"oversized block reply of {length} bytes")
    body = await reader.readexactly(length)
    return _untag(body)


def _untag(body: bytes) -> bytes:
    if not body:
        raise ProxyError("empty block reply")
    tag, payload = body[0], body[1:]
    if tag == TAG_OK:
        return payload
    message = payload.decode("utf-8", "replace")
    if tag == TAG_NOT_FOUND:
        raise OriginNotFound(message)
    if tag == TAG_BAD_CRED:
        raise BadFederationCred(message)
    if tag == TAG_BAD_TOKEN:
        raise tokens.TokenError(message)
    raise ProxyError(message)


class OriginServer:
    """Federation origin: serves file ranges to holders of the federation cred."""

    def __init__(self, root: str, cred: str):
        self.local = LocalOrigin(root, cred)
        self._server: asyncio.AbstractServer | None = None

    async def start(self, host: str, port: int) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    raw = await wire.read_frame_raw(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                try:
                    req = json.loads(raw.decode("utf-8"))
                    data = self.local.fetch(
                        req["path"], int(req["offset"]), int(req["length"]), req.get("cred", "")
                    )
                    writer.write(_tagged(TAG_OK, data))
                except BadFederationCred as exc:
                    writer.write(_tagged(TAG_BAD_CRED, str(exc).encode()))
                except OriginNotFound as exc:
                    writer.write(_tagged(TAG_NOT_FOUND, str(exc).encode()))
                except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                    writer.write(_tagged(TAG_ERROR, str(exc).encode()))
                await writer.drain()
        except wire.WireError:
            pass
        finally:
            writer.close()


class DataProxyServer:
    """Networked read-through proxy in front of an origin server."""

    def __init__(
        self,
        origin_addr: tuple[str, int],
        federation_cred: str,
        data_key: bytes,
        block_size: int = BLOCK_SIZE,
        max_bytes: int | None = None,
        cache_dir: str | None = None,
        clock=time.time,
    ):
        self.store = BlockStore(block_size=block_size, max_bytes=max_bytes, cache_dir=cache_dir)
        self.origin_addr = origin_addr
        self.federation_cred = federation_cred
        self.data_key = data_key
        self._clock = clock
        self._inflight: dict[tuple[str, int], asyncio.Future] = {}
        self._origin_lock = asyncio.Lock()
        self._origin_conn: tuple[asyncio.StreamReader, asyncio.StreamWriter] | None = None
        self._server: asyncio.AbstractServer | None = None

    async def start(self, host: str, port: int) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._origin_conn is not None:
            self._origin_conn[1].close()
            self._origin_conn = None

    async def _origin_fetch(self, path: str, offset: int, length: int) -> bytes:
        async with self._origin_lock:
            if self._origin_conn is None:
                self._origin_conn = await asyncio.open_connection(*self.origin_addr)
            reader, writer = self._origin_conn
            payload = json.dumps(
                {"path": path, "offset": offset, "length": length, "cred": self.federation_cred}
            ).encode()
            try:
                writer.write(_LEN.pack(len(payload)) + payload)
                await writer.drain()
                return await _read_block_reply(reader)
            except (ConnectionError, asyncio.IncompleteReadError):
                self._origin_conn = None
                raise ProxyError("origin connection lost") from None

    async def _get_block(self, path: str, idx: int) -> bytes:
        key = (path, idx)
        cached = self.store.get(path, idx)
        if cached is not None:
            self.store.stats.cache_hits += 1
            return cached
        pending = self._inflight.get(key)
        if pending is not None:
            data = await asyncio.shield(pending)
            self.store.stats.cache_hits += 1
            return data
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._inflight[key] = fut
        try:
            data = await self._origin_fetch(path, idx * self.store.block_size, self.store.block_size)
        except Exception as exc:
            fut.set_exception(exc)
            fut.exception()  # mark retrieved for the no-follower case
            raise
        else:
            self.store.stats.origin_fetches += 1
            self.store.put(path, idx, data)
            fut.set_result(data)
            return data
        finally:
            del self._inflight[key]

    async def fetch(self, path: str, offset: int, length: int, token: str) -> bytes:
        tokens.verify_token(token, self.data_key, "data", self._clock())
        _check_fetch_args(offset, length)
        wanted = self.store.block_range(offset, length)
        blocks = [await self._get_block(path, idx) for idx in wanted]
        out = self.store.slice_blocks(blocks, wanted.start, offset, length)
        self.store.stats.bytes_served += len(out)
        return out

    def stats(self) -> dict:
        return self.store.stats.as_dict()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    msg = await wire.read_message(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                if msg.kind == "JobStatus" and msg.body.get("what") == "stats":
                    await wire.send_message(writer, wire.ok(self.stats()))
                    continue
                if msg.kind != "Fetch":
                    writer.write(_tagged(TAG_ERROR, f"unsupported kind {msg.kind}".encode()))
                    await writer.drain()
                    continue
                body = msg.body
                try:
                    data = await self.fetch(
                        body["path"], int(body["offset"]), int(body["length"]), body.get("token", "")
                    )
                    writer.write(_tagged(TAG_OK, data))
                except tokens.TokenError as exc:
                    writer.write(_tagged(TAG_BAD_TOKEN, str(exc).encode()))
                except OriginNotFound as exc:
                    writer.write(_tagged(TAG_NOT_FOUND, str(exc).encode()))
                except (ProxyError, KeyError, TypeError, ValueError) as exc:
                    writer.write(_tagged(TAG_ERROR, str(exc).encode()))
                await writer.drain()
        except wire.WireError:
            pass
        finally:
            writer.close()


class ProxyClient:
    """Blocking proxy client; safe inside worker task threads."""

    def __init__(self, proxy: tuple[str, int], timeout: float = 30.0):
        self.addr = proxy
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=self.timeout)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def fetch(self, path: str, offset: int, length: int, token: str) -> bytes:
        sock = self._connect()
        try:
            sock.sendall(
                wire.encode(
                    wire.WireMessage(
                        "Fetch", {"path": path, "offset": offset, "length": length, "token": token}
                    )
                )
            )
            header = self._recv_exact(sock, _LEN.size)
            (length_,) = _LEN.unpack(header)
            if length_ > MAX_FETCH + 1:
                raise ProxyError(f"oversized block reply of {length_} bytes")
            return _untag(self._recv_exact(sock, length_))
        except (ConnectionError, socket.timeout):
            self.close()
            raise

    def _recv_exact(self, sock: socket.socket, count: int) -> bytes:
        buf = b""
        while len(buf) < count:
            chunk = sock.recv(count - len(buf))
            if not chunk:
                raise ConnectionError("proxy connection closed")
            buf += chunk
        return buf

    def range_reader(self, path: str, token: str):
        def read(offset: int, length: int) -> bytes:
            return self.fetch(path, offset, length, token)

        return read
