import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grimlock.attestation import ACCEPTED, REJECTED, AppraisalResult
from grimlock.core import Scope, digest, keypair_from_seed, scope_subset
from grimlock.errors import (
    AppraisalRejected,
    AudienceMismatch,
    BadSignature,
    BindingMismatch,
    EmptyGrant,
    Expired,
    MalformedToken,
    NotYetValid,
    ParentExpired,
    ScopeViolation,
    UnsupportedVersion,
)
from grimlock.tokens import TrustAnchors, decode, delegate, mint, validate

SK, PK = keypair_from_seed(digest(b"issuer"))
ANCHORS = TrustAnchors({"verifier": PK}, 30)
CB = digest(b"cb")
M = digest(b"m")
MAX = Scope.of("mail:read", "mail:send", "kv:get")
T0 = 1_760_000_000


def appraisal(max_scope=MAX, verdict=ACCEPTED, cb=CB):
    return AppraisalResult(verdict, M, cb, T0, max_scope if verdict == ACCEPTED else None,
                           None if verdict == ACCEPTED else "MeasurementRejected")


def root(scope=Scope.of("mail:read", "mail:send"), ttl=60, now=T0):
    return mint(SK, "verifier", appraisal(), "hostA/s0", "hostB/guard", scope, CB, ttl, now,
                random.Random(1))


def test_mint_narrows_to_policy():
    tok = mint(SK, "verifier", appraisal(), "hostA/s0", "hostB/guard",
               Scope.of("mail:read", "admin:all"), CB, 60, T0)
    assert tok.scope == Scope.of("mail:read")
    assert tok.exp - tok.iat == 60


def test_mint_refusals():
    with pytest.raises(AppraisalRejected):
        mint(SK, "verifier", appraisal(verdict=REJECTED), "s", "a", MAX, CB)
    with pytest.raises(EmptyGrant):
        mint(SK, "verifier", appraisal(), "s", "a", Scope.of("admin:all"), CB)
    with pytest.raises(BindingMismatch):
        mint(SK, "verifier", appraisal(), "s", "a", MAX, digest(b"other"))


def test_validate_accepts():
    tok = root()
    validate(tok, ANCHORS, "hostB/guard", CB, Scope.of("mail:read"), T0 + 10)


@pytest.mark.parametrize("exc, kwargs", [
    (AudienceMismatch, dict(audience="hostC/guard")),
    (Expired, dict(now=T0 + 60 + 31)),
    (NotYetValid, dict(now=T0 - 31)),
    (BindingMismatch, dict(cb=digest(b"x"))),
    (ScopeViolation, dict(required=Scope.of("kv:get"))),
])
def test_validate_rejections(exc, kwargs):
    args = dict(audience="hostB/guard", cb=CB, required=Scope.of("mail:read"), now=T0)
    args.update(kwargs)
    with pytest.raises(exc):
        validate(root(), ANCHORS, args["audience"], args["cb"], args["required"], args["now"])


def test_skew_boundaries_inclusive():
    tok = root()
    validate(tok, ANCHORS, "hostB/guard", CB, Scope(), T0 + 60 + 30)
    validate(tok, ANCHORS, "hostB/guard", CB, Scope(), T0 - 30)


def test_wrong_issuer_key():
    other = TrustAnchors({"verifier": keypair_from_seed(bytes(32))[1]})
    with pytest.raises(BadSignature):
        validate(root(), other, "hostB/guard", CB, Scope(), T0)


def test_anchors_must_be_nonempty():
    with pytest.raises(ValueError):
        TrustAnchors({})


def test_delegation():
    parent = root()
    child = delegate(parent, Scope.of("mail:read"), SK, "verifier", "hostC/guard", 600, T0 + 5,
                     anchors=ANCHORS)
    assert child.parent_token_id == parent.token_id
    assert child.exp == parent.exp
    with pytest.raises(ScopeViolation):
        delegate(parent, Scope.of("kv:get"), SK, "verifier", "hostC/guard")
    with pytest.raises(EmptyGrant):
        delegate(parent, Scope(), SK, "verifier", "hostC/guard", now=T0)
    with pytest.raises(ParentExpired):
        delegate(parent, Scope.of("mail:read"), SK, "verifier", "x", now=T0 + 61)
    with pytest.raises(ParentExpired):
        delegate(parent, Scope.of("mail:read"), SK, "verifier", "x", now=T0 + 60)


def test_delegate_checks_parent_signature():
    forged = root()
    forged = type(forged)(**{**forged.__dict__, "signature": bytes(64)})
    with pytest.raises(BadSignature):
        delegate(forged, Scope.of("mail:read"), SK, "verifier", "x", now=T0, anchors=ANCHORS)


entries = st.sampled_from(sorted(MAX.entries))


@given(st.lists(st.frozensets(entries), min_size=1, max_size=5), st.integers(0, 2**32))
@settings(max_examples=200, deadline=None)
def test_delegation_chain_never_widens(requests, seed):
    rng = random.Random(seed)
    tok = root(scope=MAX, ttl=300)
    now = T0
    for req in requests:
        now += rng.randint(0, 20)
        want = Scope(req)
        try:
            child = delegate(tok, want, SK, "verifier", "hostC/guard", rng.randint(1, 200), now,
                             rng=rng)
        except (ScopeViolation, EmptyGrant, ParentExpired):
            assert not scope_subset(want, tok.scope) or not len(want) or now >= tok.exp - 0
            continue
        assert scope_subset(child.scope, tok.scope) and child.exp <= tok.exp
        tok = child


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=10)


@given(names, names, names, st.frozensets(entries), st.binary(min_size=32, max_size=32),
       st.integers(0, 2**40), st.integers(1, 2**20), st.one_of(st.none(), st.binary(min_size=16, max_size=16)))
def test_token_roundtrip(issuer, subject, audience, scope, cb, iat, ttl, parent):
    from grimlock.tokens import ScopeToken, _signed
    tok = _signed(ScopeToken(bytes(16), issuer, subject, audience, Scope(scope), cb, iat, iat + ttl,
                             parent), SK)
    assert decode(tok.encode()) == tok


@pytest.mark.parametrize("mutate, exc", [
    (lambda b: b[:-1], MalformedToken), (lambda b: b + b"x", MalformedToken),
    (lambda b: b"\x07" + b[1:], UnsupportedVersion), (lambda b: b"", MalformedToken),
])
def test_decode_errors(mutate, exc):
    with pytest.raises(exc):
        decode(mutate(root().encode()))


def test_bitflip_breaks_signature_or_parse():
    raw = bytearray(root().encode())
    for i in range(0, len(raw), 7):
        flipped = bytearray(raw)
        flipped[i] ^= 0x01
        try:
            tok = decode(bytes(flipped))
        except (MalformedToken, UnsupportedVersion):
            continue
        with pytest.raises(Exception):
            validate(tok, ANCHORS, tok.audience, tok.cb_hash, Scope(), tok.iat)
