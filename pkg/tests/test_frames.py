import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from grimlock.core import Scope
from grimlock.errors import (
    BadMagic,
    InvalidContext,
    LengthMismatch,
    ProtocolError,
    UnsupportedVersion,
    reason_code,
    reason_name,
)
from grimlock.frames import (
    BindingContext,
    ControlFrame,
    FrameType,
    compute_cb,
    decode_destination,
    encode_context,
    encode_destination,
    frame_decode,
    frame_encode,
    tlv_decode,
    tlv_encode,
    tlv_map,
)
from support import channel

tlvs = st.lists(st.tuples(st.integers(0, 0xFFFF), st.binary(max_size=64)), max_size=6)


@given(st.integers(0, 255), tlvs)
def test_frame_roundtrip_and_oracle(ftype, fields):
    payload = tlv_encode(fields)
    assert payload == oracles.tlv(fields)
    raw = frame_encode(ControlFrame(ftype, payload))
    assert raw == oracles.frame(ftype, payload)
    f = frame_decode(raw)
    assert f.type == ftype and tlv_decode(f.payload) == fields


def test_bad_magic():
    with pytest.raises(BadMagic):
        frame_decode(b"XXXX" + oracles.frame(1, b"")[4:])


def test_length_mismatch():
    raw = oracles.frame(1, b"abc")
    with pytest.raises(LengthMismatch):
        frame_decode(raw[:-1])
    with pytest.raises(LengthMismatch):
        frame_decode(raw + b"z")
    with pytest.raises(LengthMismatch):
        frame_decode(raw[:8])


def test_unsupported_frame_version():
    with pytest.raises(UnsupportedVersion):
        frame_decode(oracles.frame(1, b"", version=2))


def test_unknown_type_decodes_but_is_not_a_frame_type():
    f = frame_decode(oracles.frame(0x7F, b""))
    with pytest.raises(ValueError):
        FrameType(f.type)


def test_truncated_tlv_and_duplicates():
    with pytest.raises(ProtocolError):
        tlv_decode(oracles.tlv([(1, b"abcd")])[:-1])
    with pytest.raises(ProtocolError):
        tlv_map(oracles.tlv([(1, b"a"), (1, b"b")]))


def test_destination():
    raw = encode_destination("10.0.1.1", 443)
    assert raw == bytes([10, 0, 1, 1, 1, 187])
    assert decode_destination(raw) == (__import__("ipaddress").IPv4Address("10.0.1.1"), 443)
    with pytest.raises(ProtocolError):
        decode_destination(raw[:5])


@given(st.binary(min_size=32, max_size=32), st.text(min_size=1, max_size=20),
       st.frozensets(st.from_regex(r"[a-z]{1,4}:[a-z]{1,4}", fullmatch=True), max_size=4))
def test_context_matches_oracle(nonce, audience, entries):
    ctx = BindingContext(nonce, audience, Scope(entries))
    assert encode_context(ctx) == oracles.context_bytes(nonce, audience, entries)


@pytest.mark.parametrize("ctx", [
    BindingContext(b"short", "a", Scope()),
    BindingContext(bytes(32), "", Scope()),
    BindingContext(bytes(32), "a", Scope(), version=2),
])
def test_invalid_context(ctx):
    with pytest.raises(InvalidContext):
        encode_context(ctx)


def test_compute_cb_both_ends_agree_and_match_oracle():
    _, _, _, hi, hr = channel()
    ctx = BindingContext(bytes(32), "hostB/guard", Scope.of("kv:get"))
    a, b = compute_cb(hi, ctx), compute_cb(hr, ctx)
    assert a.cb == b.cb and a.cb_hash == b.cb_hash
    assert a.cb == oracles.exporter(hi._exporter_secret, b"EXPORTER-grimlock-a2a-v1",
                                    encode_context(ctx), 32)
    assert bytes(a.cb_hash) == oracles.sha256(a.cb)
    other = compute_cb(hi, BindingContext(bytes(32), "hostB/guard", Scope.of("kv:put")))
    assert other.cb != a.cb


def test_reason_codes_roundtrip():
    assert reason_name(reason_code("BindingMismatch")) == "BindingMismatch"
    assert reason_code("nope") == 0xFFFF
    assert reason_name(999).startswith("Unknown")
