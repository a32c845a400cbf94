import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casa_mini import wire

json_values = st.recursive(
    st.none()
    | st.booleans()
    | st.integers(min_value=-(2**53), max_value=2**53)
    | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=12,
)


@settings(max_examples=200, deadline=None)
@given(kind=st.sampled_from(sorted(wire.KINDS)), body=st.dictionaries(st.text(max_size=10), json_values, max_size=5))
def test_encode_decode_identity(kind, body):
    msg = wire.WireMessage(kind, body)
    assert wire.decode(wire.encode(msg)[4:]) == msg


def test_unknown_kind_rejected():
    with pytest.raises(wire.WireError, match="unknown message kind"):
        wire.WireMessage("Bogus", {})
    with pytest.raises(wire.WireError):
        wire.decode(b'{"kind": "Nope", "body": {}}')


def test_non_object_frames_rejected():
    with pytest.raises(wire.WireError):
        wire.decode(b"[1,2,3]")
    with pytest.raises(wire.WireError):
        wire.decode(b'{"kind": 5, "body": {}}')
    with pytest.raises(wire.WireError):
        wire.decode(b'{"kind": "Ok", "body": []}')
    with pytest.raises(wire.WireError):
        wire.decode(b"\xff\xfe")


def test_oversize_frame_errors():
    with pytest.raises(wire.FrameTooLarge):
        wire.encode(wire.WireMessage("Ok", {"x": "a" * wire.MAX_FRAME}))


def test_oversize_incoming_length_prefix():
    async def scenario():
        reader = asyncio.StreamReader()
        reader.feed_data((wire.MAX_FRAME + 1).to_bytes(4, "big") + b"x")
        with pytest.raises(wire.FrameTooLarge):
            await wire.read_message(reader)

    asyncio.run(scenario())


def test_round_trip_over_stream():
    async def scenario():
        msgs = [
            wire.WireMessage("Heartbeat", {"worker_id": "w0001"}),
            wire.ok({"n": 1}),
            wire.err("x", "y"),
        ]
        reader = asyncio.StreamReader()
        for m in msgs:
            reader.feed_data(wire.encode(m))
        reader.feed_eof()
        out = [await wire.read_message(reader) for _ in msgs]
        assert out == msgs

    asyncio.run(scenario())


def test_raise_on_err():
    with pytest.raises(wire.RequestError, match="boom: went wrong"):
        wire.raise_on_err(wire.err("boom", "went wrong"))
    assert wire.raise_on_err(wire.ok({"a": 1})).body == {"a": 1}
