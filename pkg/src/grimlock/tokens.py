"""Scope Tokens: short-lived, channel-bound, signed grants.

Canonical token bytes::

    version u8 || token_id[16] || lp16 issuer_id || lp16 subject || lp16 audience
    || scope_canonical_bytes || cb_hash[32] || parent_flag u8 || [parent_token_id[16]]
    || iat u64 || exp u64 || signature[64]
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from .attestation import AppraisalResult
from .core import (
    DIGEST_LEN,
    Digest,
    Reader,
    Scope,
    lp16,
    read_scope,
    scope_canonical_bytes,
    scope_subset,
    sign,
    u8,
    u64,
    verify,
)
from .errors import (
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

TOKEN_VERSION = 1
DEFAULT_TTL = 60
DEFAULT_SKEW = 30


@dataclass(frozen=True)
class ScopeToken:
    token_id: bytes
    issuer_id: str
    subject: str
    audience: str
    scope: Scope
    cb_hash: Digest
    iat: int
    exp: int
    parent_token_id: Optional[bytes] = None
    signature: bytes = field(default=b"\x00" * 64, repr=False)
    version: int = TOKEN_VERSION

    def signed_bytes(self) -> bytes:
        out = (u8(self.version) + self.token_id + lp16(self.issuer_id) + lp16(self.subject)
               + lp16(self.audience) + scope_canonical_bytes(self.scope) + bytes(self.cb_hash))
        if self.parent_token_id is None:
            out += u8(0)
        else:
            out += u8(1) + self.parent_token_id
        return out + u64(self.iat) + u64(self.exp)

    def encode(self) -> bytes:
        return self.signed_bytes() + self.signature


def encode(token: ScopeToken) -> bytes:
    return token.encode()


def decode(data: bytes) -> ScopeToken:
    if not data:
        raise MalformedToken("empty input")
    if data[0] != TOKEN_VERSION:
        raise UnsupportedVersion(f"token version {data[0]}")
    r = Reader(data, MalformedToken)
    version = r.u8()
    token_id = r.take(16)
    issuer_id, subject, audience = r.text(), r.text(), r.text()
    scope = read_scope(r)
    cb_hash = Digest(r.take(DIGEST_LEN))
    flag = r.u8()
    if flag not in (0, 1):
        raise MalformedToken(f"bad parent flag {flag}")
    parent = r.take(16) if flag else None
    iat, exp = r.u64(), r.u64()
    signature = r.take(64)
    r.expect_end()
    return ScopeToken(token_id, issuer_id, subject, audience, scope, cb_hash, iat, exp,
                      parent, signature, version)


@dataclass(frozen=True)
class TrustAnchors:
    issuer_keys: Mapping[str, bytes]
    clock_skew: int = DEFAULT_SKEW

    def __post_init__(self):
        if not self.issuer_keys:
            raise ValueError("trust anchors must name at least one issuer")


def _token_id(rng: random.Random | None) -> bytes:
    return rng.randbytes(16) if rng is not None else os.urandom(16)


def _signed(token: ScopeToken, issuer_key: bytes) -> ScopeToken:
    return replace(token, signature=sign(issuer_key, token.signed_bytes()))


def mint(issuer_key: bytes, issuer_id: str, appraisal: AppraisalResult, subject: str,
         audience: str, requested_scope: Scope, cb_hash: Digest, ttl: int = DEFAULT_TTL,
         now: int = 0, rng: random.Random | None = None) -> ScopeToken:
    """Issue a token for ``requested_scope`` narrowed to the appraisal's maximum."""
    if not appraisal.accepted:
        raise AppraisalRejected(appraisal.reason or "appraisal not accepted")
    if appraisal.cb_hash != cb_hash:
        raise BindingMismatch("appraisal and token disagree on cb_hash")
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    granted = requested_scope & (appraisal.max_scope or Scope())
    if not len(granted):
        raise EmptyGrant(f"nothing of {requested_scope} is grantable")
    token = ScopeToken(_token_id(rng), issuer_id, subject, audience, granted, Digest(cb_hash),
                       now, now + ttl)
    return _signed(token, issuer_key)


def validate(token: ScopeToken, anchors: TrustAnchors, expected_audience: str,
             local_cb_hash: Digest, required_scope: Scope, now: int) -> None:
    """Raise the first failing TokenError; return None when the token is acceptable."""
    key = anchors.issuer_keys.get(token.issuer_id)
    if key is None or not verify(key, token.signed_bytes(), token.signature):
        raise BadSignature(f"token {token.token_id.hex()} not signed by {token.issuer_id!r}")
    if token.audience != expected_audience:
        raise AudienceMismatch(f"{token.audience!r} != {expected_audience!r}")
    if now > token.exp + anchors.clock_skew:
        raise Expired(f"now={now} exp={token.exp} skew={anchors.clock_skew}")
    if now < token.iat - anchors.clock_skew:
        raise NotYetValid(f"now={now} iat={token.iat} skew={anchors.clock_skew}")
    if token.cb_hash != local_cb_hash:
        raise BindingMismatch("token is bound to a different channel")
    if not scope_subset(required_scope, token.scope):
        raise ScopeViolation(f"{required_scope} not within {token.scope}")


def delegate(parent: ScopeToken, child_scope: Scope, issuer_key: bytes, issuer_id: str,
             audience: str, ttl: int = DEFAULT_TTL, now: int = 0, *,
             subject: str | None = None, cb_hash: Digest | None = None,
             anchors: TrustAnchors | None = None,
             rng: random.Random | None = None) -> ScopeToken:
    """Derive a narrower child token; the child never outlives its parent.

    The child keeps the parent's channel binding unless ``cb_hash`` is given
    (re-binding happens when the delegatee's guard runs its own gate).
    """
    if anchors is not None:
        key = anchors.issuer_keys.get(parent.issuer_id)
        if key is None or not verify(key, parent.signed_bytes(), parent.signature):
            raise BadSignature("parent token signature invalid")
    if now > parent.exp:
        raise ParentExpired(f"parent expired at {parent.exp}")
    if not scope_subset(child_scope, parent.scope):
        raise ScopeViolation(f"{child_scope} not within parent scope {parent.scope}")
    if not len(child_scope):
        raise EmptyGrant("empty delegation")
    child = ScopeToken(_token_id(rng), issuer_id, subject or parent.subject, audience,
                       child_scope, Digest(cb_hash if cb_hash is not None else parent.cb_hash),
                       now, min(now + ttl, parent.exp), parent.token_id)
    if child.exp <= child.iat:
        raise ParentExpired("no validity window left under the parent")
    return _signed(child, issuer_key)
