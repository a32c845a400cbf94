import base64
import hashlib
import hmac as hmac_mod
import json
import time

import pytest

from casa_mini import authd, certs, tokens

from .conftest import make_assertion


@pytest.fixture(scope="module")
def idp(idp_keys):
    return idp_keys


@pytest.fixture()
def auth(idp):
    _, public_pem = idp
    return authd.AuthService(public_pem, token_ttl=3600.0)


# ---- tokens -------------------------------------------------------------------


def test_token_round_trip_and_reference_mac():
    key = b"k" * 32
    token = tokens.mint_token(key, "alice", "data", exp=5000.0)
    claims = tokens.verify_token(token, key, "data", now=100.0)
    assert claims["sub"] == "alice" and claims["aud"] == "data"
    # recompute the MAC from first principles (stdlib reference vectors)
    payload_b64, mac_b64 = token.split(".")
    pad = "=" * (-len(payload_b64) % 4)
    payload = base64.urlsafe_b64decode(payload_b64 + pad)
    expected = hmac_mod.new(key, payload, hashlib.sha256).digest()
    got = base64.urlsafe_b64decode(mac_b64 + "=" * (-len(mac_b64) % 4))
    assert got == expected
    assert json.loads(payload)["iss"] == "casa-authd"


def test_token_error_order_expired_but_mac_valid():
    # the MAC must verify on an expired token: only expiry fails
    key = b"q" * 32
    token = tokens.mint_token(key, "alice", "data", exp=50.0)
    payload_b64, mac_b64 = token.split(".")
    payload = base64.urlsafe_b64decode(payload_b64 + "=" * (-len(payload_b64) % 4))
    mac = base64.urlsafe_b64decode(mac_b64 + "=" * (-len(mac_b64) % 4))
    assert hmac_mod.compare_digest(hmac_mod.new(key, payload, hashlib.sha256).digest(), mac)
    with pytest.raises(tokens.TokenExpired):
        tokens.verify_token(token, key, "data", now=100.0)


def test_token_wrong_audience():
    key = b"k" * 32
    token = tokens.mint_token(key, "alice", "data", exp=5000.0)
    with pytest.raises(tokens.TokenWrongAudience):
        tokens.verify_token(token, key, "batch", now=0.0)


def test_token_malformed():
    key = b"k" * 32
    with pytest.raises(tokens.TokenMalformed):
        tokens.verify_token("nodot", key, "data", now=0.0)
    with pytest.raises(tokens.TokenMalformed):
        tokens.verify_token("a.b.c", key, "data", now=0.0)


def test_token_payload_tamper_invalidates_mac():
    key = b"k" * 32
    token = tokens.mint_token(key, "alice", "data", exp=5000.0)
    payload_b64, mac_b64 = token.split(".")
    raw = bytearray(base64.urlsafe_b64decode(payload_b64 + "=" * (-len(payload_b64) % 4)))
    for i in range(len(raw)):
        tampered = bytes(raw[:i]) + bytes([raw[i] ^ 0x01]) + bytes(raw[i + 1 :])
        forged = base64.urlsafe_b64encode(tampered).rstrip(b"=").decode() + "." + mac_b64
        with pytest.raises(tokens.TokenError):
            tokens.verify_token(forged, key, "data", now=0.0)


# ---- identity assertions ---------------------------------------------------------


def test_verify_identity_member(idp, auth):
    assert auth.verify_identity(make_assertion(idp, sub="alice", groups=("cms",))) == "alice"


def test_verify_identity_not_member(idp, auth):
    with pytest.raises(authd.NotMember, match="not a member"):
        auth.verify_identity(make_assertion(idp, sub="bob", groups=("atlas",)))


def test_verify_identity_bad_signature(idp, auth):
    assertion = make_assertion(idp)
    sig = bytearray(base64.b64decode(assertion["sig"]))
    sig[8] ^= 0x01
    assertion["sig"] = base64.b64encode(bytes(sig)).decode()
    with pytest.raises(authd.BadSignature):
        auth.verify_identity(assertion)


def test_verify_identity_payload_tamper(idp, auth):
    assertion = make_assertion(idp, sub="bob", groups=("atlas",))
    assertion["payload"]["groups"] = ["cms"]  # promote yourself -> signature breaks
    with pytest.raises(authd.BadSignature):
        auth.verify_identity(assertion)


def test_verify_identity_expired(idp, auth):
    _, _ = idp
    expired = make_assertion(idp, ttl=-10.0)
    with pytest.raises(authd.AssertionExpired):
        auth.verify_identity(expired)


def test_distinct_error_codes():
    assert authd.BadSignature.code != authd.AssertionExpired.code != authd.NotMember.code


# ---- bundles -----------------------------------------------------------------------


def test_mint_bundle_contents(auth):
    bundle = auth.mint_bundle("alice")
    assert bundle.cluster_id == "alice-1"
    assert bundle.sni_hostname == "alice-1.dask.local"
    assert certs.cert_cn(bundle.user.cert_pem) == "alice"
    assert certs.chains_to(bundle.user.cert_pem, bundle.ca.cert_pem)
    assert certs.chains_to(bundle.host.cert_pem, bundle.ca.cert_pem)
    batch_claims = auth.verify_token(bundle.batch_token, "batch")
    data_claims = auth.verify_token(bundle.data_token, "data")
    assert batch_claims["sub"] == data_claims["sub"] == "alice"
    # configured TTL shows up as exp - iat equivalence: exp is now + ttl
    assert batch_claims["exp"] - time.time() == pytest.approx(3600.0, abs=60.0)


def test_mint_bundle_idempotent_per_subject(auth):
    a = auth.mint_bundle("alice")
    b = auth.mint_bundle("alice")
    assert a is b


def test_cross_ca_isolation(auth):
    alice = auth.mint_bundle("alice")
    bob = auth.mint_bundle("bob")
    assert not certs.chains_to(alice.user.cert_pem, bob.ca.cert_pem)
    assert not certs.chains_to(bob.user.cert_pem, alice.ca.cert_pem)


def test_no_federation_material_in_bundle(auth):
    bundle = auth.mint_bundle("carol")
    wire_form = bundle.to_wire()
    assert "host_key" not in wire_form  # held server-side
    blob = json.dumps(wire_form)
    assert "federation" not in blob
    # only the two facility audiences exist; nothing grants outside access
    for aud in ("batch", "data"):
        claims = auth.verify_token(getattr(bundle, f"{aud}_token"), aud)
        assert claims["iss"] == "casa-authd"
        assert claims["aud"] == aud


def test_login_combines_verify_and_mint(idp, auth):
    bundle = auth.login(make_assertion(idp, sub="dave"))
    assert bundle.subject == "dave"
    with pytest.raises(authd.NotMember):
        auth.login(make_assertion(idp, sub="eve", groups=("atlas",)))


def test_oversize_frame_closes_connection(auth):
    import asyncio

    from casa_mini import authd as authd_mod
    from casa_mini import wire

    async def scenario():
        server = await authd_mod.serve(auth, "127.0.0.1", 0)
        host, port = server.sockets[0].getsockname()[:2]
        reader, writer = await asyncio.open_connection(host, port)
        writer.write((wire.MAX_FRAME + 1).to_bytes(4, "big") + b"\x00" * 64)
        await writer.drain()
        data = await asyncio.wait_for(reader.read(), 10)
        assert data == b""  # connection closed, no reply
        writer.close()
        server.close()
        await server.wait_closed()

    asyncio.run(scenario())
