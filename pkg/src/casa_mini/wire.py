"""Message framing shared by every TCP/TLS control link.

A frame is a 4-byte big-endian length prefix followed by a UTF-8 JSON object
{"kind": str, "body": object}.  Frames above 16 MiB are a protocol violation
and close the connection.  Binary payloads (data-plane blocks) use the same
length prefix around raw bytes instead of JSON; see data_proxy.
"""

from __future__ import annotations

import asyncio
import json
import struct
from dataclasses import dataclass, field

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")

# Control-plane vocabulary.  Decoding any kind outside this set is rejected.
KINDS = frozenset(
    {
        # cluster control
        "WorkerHello",
        "Heartbeat",
        "AssignTask",
        "TaskDone",
        "TaskFailed",
        "SubmitJob",
        "JobStatus",
        "ScaleRequest",
        # facility services
        "Login",
        "Fetch",
        "RegisterRoute",
        "RemoveRoute",
        "ListRoutes",
        "Cancel",
        # generic replies
        "Ok",
        "Err",
    }
)


class WireError(ValueError):
    pass


class FrameTooLarge(WireError):
    pass


@dataclass(frozen=True)
class WireMessage:
    kind: str
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WireError(f"unknown message kind {self.kind!r}")


def encode(msg: WireMessage) -> bytes:
    payload = json.dumps({"kind": msg.kind, "body": msg.body}, separators=(",", ":")).encode()
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(payload)) + payload


def decode(payload: bytes) -> WireMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"bad frame payload: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("kind"), str):
        raise WireError("frame is not a {kind, body} object")
    body = obj.get("body", {})
    if not isinstance(body, dict):
        raise WireError("frame body is not an object")
    return WireMessage(kind=obj["kind"], body=body)


def encode_block(data: bytes) -> bytes:
    """Length-prefix a raw binary block (data-plane replies)."""
    if len(data) > MAX_FRAME:
        raise FrameTooLarge(f"block of {len(data)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(data)) + data


async def read_frame_raw(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(_LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"incoming frame of {length} bytes exceeds {MAX_FRAME}")
    return await reader.readexactly(length)


async def read_message(reader: asyncio.StreamReader) -> WireMessage:
    return decode(await read_frame_raw(reader))


async def send_message(writer: asyncio.StreamWriter, msg: WireMessage) -> None:
    writer.write(encode(msg))
    await writer.drain()


def ok(body: dict | None = None) -> WireMessage:
    return WireMessage("Ok", body or {})


def err(code: str, message: str) -> WireMessage:
    return WireMessage("Err", {"code": code, "message": message})


class RequestError(Exception):
    """An Err reply surfaced on the client side."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def raise_on_err(msg: WireMessage) -> WireMessage:
    if msg.kind == "Err":
        raise RequestError(msg.body.get("code", "error"), msg.body.get("message", ""))
    return msg
