import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from grimlock.core import (
    Digest,
    HostIdentity,
    Reader,
    SandboxIdentity,
    Scope,
    audience_for,
    digest,
    host_of_audience,
    keypair_from_seed,
    read_scope,
    scope_canonical_bytes,
    scope_hash,
    scope_subset,
    sign,
    verify,
)
from grimlock.errors import InvalidIdentity, InvalidScopeEntry

entry = st.from_regex(r"[a-z0-9_-]{1,6}:[A-Za-z0-9._/-]{1,8}", fullmatch=True)
scopes = st.frozensets(entry, max_size=6).map(Scope)


def test_sha256_vectors():
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert digest("abc".encode()).hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_digest_length_enforced():
    with pytest.raises(ValueError):
        Digest(b"short")


@given(st.binary(max_size=256))
def test_digest_matches_hashlib(data):
    assert digest(data) == oracles.sha256(data)
    assert digest(data) == digest(data)


def test_scope_subset_examples():
    assert scope_subset(Scope.of("read:mail"), Scope.of("read:mail", "send:mail"))
    assert scope_subset(Scope(), Scope())
    assert not scope_subset(Scope.of("send:mail"), Scope.of("read:mail"))


def test_scope_canonical_examples():
    assert scope_canonical_bytes(Scope.of("b:x", "a:y")) == scope_canonical_bytes(Scope.of("a:y", "b:x"))
    assert scope_canonical_bytes(Scope()) == b"\x00\x00"
    assert scope_canonical_bytes(Scope.of("a:y")) == bytes.fromhex("00010003") + b"a:y"


@pytest.mark.parametrize("bad", ["", "noverb", "UP:x", "a:", ":x", "a:b c", "a:b,c"])
def test_scope_entry_validation(bad):
    with pytest.raises(InvalidScopeEntry):
        Scope.of(bad)


@given(scopes)
def test_scope_bytes_match_oracle_and_roundtrip(scope):
    raw = scope_canonical_bytes(scope)
    assert raw == oracles.scope_bytes(scope.entries)
    r = Reader(raw)
    assert read_scope(r) == scope
    assert r.remaining == 0
    assert scope_hash(scope) == oracles.sha256(raw)


@given(scopes, scopes)
def test_scope_algebra(a, b):
    assert scope_subset(a & b, a) and scope_subset(a & b, b)
    assert scope_subset(a, a | b)
    assert Scope.parse(str(a)) == a


def test_read_scope_rejects_noncanonical_order():
    raw = bytes.fromhex("0002") + oracles.lp("b:x") + oracles.lp("a:y")
    with pytest.raises(ValueError):
        read_scope(Reader(raw))


def test_host_identity_roundtrip_and_audience():
    _, pk = keypair_from_seed(bytes(32))
    ident = HostIdentity("hostB", pk)
    assert HostIdentity.decode(ident.encode()) == ident
    assert ident.audience == audience_for("hostB") == "hostB/guard"
    assert host_of_audience("hostB/guard") == "hostB"
    with pytest.raises((InvalidIdentity, ValueError)):
        HostIdentity("a/b", pk)


def test_sandbox_identity_ref():
    s = SandboxIdentity("hostA", "s0", digest(b"m"))
    assert s.ref == "hostA/s0"


@given(st.binary(min_size=32, max_size=32), st.binary(max_size=64))
def test_sign_verify(seed_bytes, msg):
    sk, pk = keypair_from_seed(seed_bytes)
    sig = sign(sk, msg)
    assert verify(pk, msg, sig)
    assert not verify(pk, msg + b"x", sig)
