"""Mock-TEE evidence and policy-driven appraisal.

A software Ed25519 key registered with the verifier stands in for a hardware
quote key. Evidence carries what a quote would: a measurement, a freshness
nonce and a user-data commitment (here the hash of the channel binding).

Canonical evidence bytes::

    version u8 || lp16 attester_id || measurement[32] || nonce[32] || cb_hash[32]
    || u16 claim_count || (lp16 key || lp16 value)* || signature[64]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Mapping

from .core import (
    DIGEST_LEN,
    Digest,
    Reader,
    Scope,
    lp16,
    sign,
    u8,
    u16,
    verify,
)
from .errors import BadNonceLength, InvalidScopeEntry, MalformedEvidence, PolicyParseError

EVIDENCE_VERSION = 1
NONCE_LEN = 32
DEFAULT_NONCE_WINDOW = 120

ACCEPTED = "ACCEPTED"
REJECTED = "REJECTED"

# appraisal check order; the first failing check is reported
CHECKS = ("BadSignature", "NonceMismatch", "ReplayDetected", "BindingMismatch", "MeasurementRejected")


@dataclass(frozen=True)
class Evidence:
    attester_id: str
    measurement: Digest
    nonce: bytes
    cb_hash: Digest
    claims: tuple[tuple[str, str], ...] = ()
    signature: bytes = field(default=b"\x00" * 64, repr=False)
    version: int = EVIDENCE_VERSION

    def signed_bytes(self) -> bytes:
        out = (u8(self.version) + lp16(self.attester_id) + bytes(self.measurement)
               + self.nonce + bytes(self.cb_hash) + u16(len(self.claims)))
        for k, v in self.claims:
            out += lp16(k) + lp16(v)
        return out

    def encode(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "Evidence":
        r = Reader(data, MalformedEvidence)
        version = r.u8()
        if version != EVIDENCE_VERSION:
            raise MalformedEvidence(f"unsupported evidence version {version}")
        attester_id = r.text()
        measurement = Digest(r.take(DIGEST_LEN))
        nonce = r.take(NONCE_LEN)
        cb_hash = Digest(r.take(DIGEST_LEN))
        claims = tuple((r.text(), r.text()) for _ in range(r.u16()))
        signature = r.take(64)
        r.expect_end()
        return cls(attester_id, measurement, nonce, cb_hash, claims, signature, version)

    def claim(self, key: str) -> str | None:
        for k, v in self.claims:
            if k == key:
                return v
        return None


def attest(attester_key: bytes, attester_id: str, measurement: Digest, cb_hash: Digest,
           nonce: bytes, claims: tuple[tuple[str, str], ...] = ()) -> Evidence:
    if len(nonce) != NONCE_LEN:
        raise BadNonceLength(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
    unsigned = Evidence(attester_id, Digest(measurement), bytes(nonce), Digest(cb_hash),
                        tuple(claims))
    sig = sign(attester_key, unsigned.signed_bytes())
    return Evidence(attester_id, unsigned.measurement, unsigned.nonce, unsigned.cb_hash,
                    unsigned.claims, sig)


def verify_evidence(ev: Evidence, anchors: Mapping[str, bytes]) -> bool:
    key = anchors.get(ev.attester_id)
    return key is not None and verify(key, ev.signed_bytes(), ev.signature)


@dataclass(frozen=True)
class AppraisalPolicy:
    allowed_measurements: frozenset[Digest] = frozenset()
    max_evidence_age: int = DEFAULT_NONCE_WINDOW
    grantable_scopes: Mapping[Digest, Scope] = field(default_factory=dict)

    def max_scope(self, measurement: Digest) -> Scope:
        return self.grantable_scopes.get(Digest(measurement), Scope())


@dataclass(frozen=True)
class AppraisalResult:
    verdict: str
    measurement: Digest
    cb_hash: Digest
    appraised_at: int
    max_scope: Scope | None = None
    reason: str | None = None
    attester_id: str = ""

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPTED


class NonceCache:
    """Single-use nonce registry; entries older than ``window`` are purged lazily."""

    def __init__(self, window: int = DEFAULT_NONCE_WINDOW):
        self.window = window
        self.entries: dict[object, int] = {}
        self._lock = threading.Lock()

    def check_and_store(self, nonce, now: int) -> bool:
        with self._lock:
            stale = [n for n, t in self.entries.items() if now - t >= self.window]
            for n in stale:
                del self.entries[n]
            if nonce in self.entries:
                return False
            self.entries[nonce] = now
            return True

    def __contains__(self, nonce) -> bool:
        with self._lock:
            return nonce in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def nonce_check_and_store(cache: NonceCache, nonce, now: int) -> bool:
    return cache.check_and_store(nonce, now)


def appraise(ev: Evidence, policy: AppraisalPolicy, expected_cb_hash: Digest,
             expected_nonce: bytes, cache: NonceCache, anchors: Mapping[str, bytes],
             now: int) -> AppraisalResult:
    """Run the five checks in fixed order and report the first failure.

    The nonce cache key is ``(attester_id, nonce)``: with mutual attestation a
    single flow nonce legitimately appears in two pieces of evidence.
    """
    def reject(reason: str) -> AppraisalResult:
        return AppraisalResult(REJECTED, ev.measurement, ev.cb_hash, now, None, reason,
                               ev.attester_id)

    if not verify_evidence(ev, anchors):
        return reject("BadSignature")
    if ev.nonce != expected_nonce:
        return reject("NonceMismatch")
    if not cache.check_and_store((ev.attester_id, bytes(ev.nonce)), now):
        return reject("ReplayDetected")
    if ev.cb_hash != expected_cb_hash:
        return reject("BindingMismatch")
    if ev.measurement not in policy.allowed_measurements:
        return reject("MeasurementRejected")
    return AppraisalResult(ACCEPTED, ev.measurement, ev.cb_hash, now,
                           policy.max_scope(ev.measurement), None, ev.attester_id)


# -- policy file -------------------------------------------------------------

def parse_policy(text: str) -> AppraisalPolicy:
    """Parse the line-oriented policy format.

    ``measurement <hex32> allow``, ``grant <hex32> <entry>[,<entry>...]``,
    ``max_age <seconds>``; '#' starts a comment.
    """
    allowed: set[Digest] = set()
    grants: dict[Digest, Scope] = {}
    max_age = DEFAULT_NONCE_WINDOW

    def measurement(tok: str, lineno: int) -> Digest:
        try:
            return Digest(bytes.fromhex(tok))
        except ValueError:
            raise PolicyParseError(f"line {lineno}: bad measurement {tok!r}") from None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "measurement" and len(parts) == 3 and parts[2] == "allow":
            allowed.add(measurement(parts[1], lineno))
        elif parts[0] == "grant" and len(parts) == 3:
            m = measurement(parts[1], lineno)
            try:
                grants[m] = grants.get(m, Scope()) | Scope.parse(parts[2])
            except InvalidScopeEntry as exc:
                raise PolicyParseError(f"line {lineno}: {exc}") from None
        elif parts[0] == "max_age" and len(parts) == 2 and parts[1].isdigit():
            max_age = int(parts[1])
        else:
            raise PolicyParseError(f"line {lineno}: cannot parse {raw!r}")
    return AppraisalPolicy(frozenset(allowed), max_age, grants)


def dump_policy(policy: AppraisalPolicy) -> str:
    lines = [f"max_age {policy.max_evidence_age}"]
    lines += [f"measurement {m.hex()} allow" for m in sorted(policy.allowed_measurements)]
    lines += [f"grant {m.hex()} {scope}" for m, scope in
              sorted(policy.grantable_scopes.items()) if len(scope)]
    return "\n".join(lines) + "\n"
