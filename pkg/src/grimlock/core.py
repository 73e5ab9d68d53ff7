"""Identities, scopes, digests and the canonical byte encodings built on them.

All multi-byte integers are big-endian. Variable-length strings are encoded
as a u16 length followed by UTF-8 bytes.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import InvalidIdentity, InvalidScopeEntry

DIGEST_LEN = 32
SIGNATURE_LEN = 64

_SCOPE_ENTRY = re.compile(r"[a-z0-9_-]+:[A-Za-z0-9._/-]+")


class Digest(bytes):
    """A 32-byte SHA-256 output."""

    def __new__(cls, value: bytes = b"\x00" * DIGEST_LEN):
        value = bytes(value)
        if len(value) != DIGEST_LEN:
            raise ValueError(f"digest must be {DIGEST_LEN} bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}...)"


ZERO_DIGEST = Digest(b"\x00" * DIGEST_LEN)


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


# -- byte-level helpers ------------------------------------------------------

def u8(n: int) -> bytes:
    return struct.pack(">B", n)


def u16(n: int) -> bytes:
    return struct.pack(">H", n)


def u32(n: int) -> bytes:
    return struct.pack(">I", n)


def u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def lp16(data: bytes | str) -> bytes:
    """u16 length prefix followed by the bytes (str is UTF-8 encoded)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("field longer than 65535 bytes")
    return u16(len(data)) + data


class Reader:
    """Cursor over a byte string; raises ``error`` on any short read."""

    def __init__(self, data: bytes, error: type[Exception] = ValueError):
        self.data = bytes(data)
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.error(f"truncated input at offset {self.pos} (need {n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp16(self) -> bytes:
        return self.take(self.u16())

    def text(self) -> str:
        raw = self.lp16()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.error(f"invalid UTF-8: {exc}") from None

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise self.error(f"{self.remaining} trailing bytes")


# -- scopes ------------------------------------------------------------------

def _check_entry(entry: str) -> str:
    if not isinstance(entry, str) or not _SCOPE_ENTRY.fullmatch(entry):
        raise InvalidScopeEntry(f"invalid scope entry {entry!r}")
    return entry


@dataclass(frozen=True)
class Scope:
    """A set of ``verb:resource`` permissions."""

    entries: frozenset[str] = frozenset()

    def __init__(self, entries: Iterable[str] = ()):
        if isinstance(entries, str):
            entries = (entries,)
        object.__setattr__(self, "entries", frozenset(_check_entry(e) for e in entries))

    @classmethod
    def of(cls, *entries: str) -> "Scope":
        return cls(entries)

    def canonical(self) -> list[str]:
        return sorted(self.entries)

    def __iter__(self):
        return iter(self.canonical())

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry: object) -> bool:
        return entry in self.entries

    def __and__(self, other: "Scope") -> "Scope":
        return Scope(self.entries & other.entries)

    def __or__(self, other: "Scope") -> "Scope":
        return Scope(self.entries | other.entries)

    def __str__(self) -> str:
        return ",".join(self.canonical())

    @classmethod
    def parse(cls, text: str) -> "Scope":
        text = text.strip()
        return cls(p.strip() for p in text.split(",") if p.strip()) if text else cls()


def scope_subset(child: Scope, parent: Scope) -> bool:
    return child.entries <= parent.entries


def scope_canonical_bytes(scope: Scope | Iterable[str]) -> bytes:
    entries = scope.canonical() if isinstance(scope, Scope) else sorted(set(scope))
    for e in entries:
        _check_entry(e)
    return u16(len(entries)) + b"".join(lp16(e) for e in entries)


def read_scope(reader: Reader) -> Scope:
    count = reader.u16()
    entries = [reader.text() for _ in range(count)]
    if entries != sorted(set(entries)):
        raise reader.error("scope entries not in canonical order")
    try:
        return Scope(entries)
    except InvalidScopeEntry as exc:
        raise reader.error(str(exc)) from None


def scope_hash(scope: Scope) -> Digest:
    return digest(scope_canonical_bytes(scope))


# -- identities --------------------------------------------------------------

@dataclass(frozen=True)
class HostIdentity:
    host_id: str
    guard_pubkey: bytes

    def __post_init__(self):
        if not self.host_id or "/" in self.host_id:
            raise InvalidIdentity(f"bad host_id {self.host_id!r}")
        if len(self.guard_pubkey) != 32:
            raise InvalidIdentity("guard_pubkey must be 32 bytes")

    @property
    def audience(self) -> str:
        return f"{self.host_id}/guard"

    def encode(self) -> bytes:
        return lp16(self.host_id) + self.guard_pubkey

    @classmethod
    def decode(cls, data: bytes) -> "HostIdentity":
        r = Reader(data, InvalidIdentity)
        host_id = r.text()
        key = r.take(32)
        r.expect_end()
        return cls(host_id, key)


@dataclass(frozen=True)
class SandboxIdentity:
    host_id: str
    sandbox_id: str
    measurement: Digest

    def __post_init__(self):
        if not self.host_id or "/" in self.host_id:
            raise InvalidIdentity(f"bad host_id {self.host_id!r}")
        if not self.sandbox_id or "/" in self.sandbox_id:
            raise InvalidIdentity(f"bad sandbox_id {self.sandbox_id!r}")
        if len(self.measurement) != DIGEST_LEN:
            raise InvalidIdentity("measurement must be 32 bytes")

    @property
    def ref(self) -> str:
        return f"{self.host_id}/{self.sandbox_id}"


def audience_for(host_id: str) -> str:
    return f"{host_id}/guard"


def host_of_audience(audience: str) -> str | None:
    host, sep, tail = audience.partition("/")
    return host if sep and tail == "guard" and host else None


# -- signatures (Ed25519; signing keys are seed || public key, 64 bytes) ------

def keypair_from_seed(seed: bytes) -> tuple[bytes, bytes]:
    """Return ``(signing_key64, verify_key32)`` for a 32-byte seed."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
    return seed + pub, pub


def verify_key_of(signing_key: bytes) -> bytes:
    if len(signing_key) != 64:
        raise ValueError("signing key must be 64 bytes")
    return Ed25519PrivateKey.from_private_bytes(signing_key[:32]).public_key().public_bytes_raw()


def sign(signing_key: bytes, message: bytes) -> bytes:
    if len(signing_key) != 64:
        raise ValueError("signing key must be 64 bytes")
    return Ed25519PrivateKey.from_private_bytes(signing_key[:32]).sign(message)


def verify(verify_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(verify_key) != 32 or len(signature) != SIGNATURE_LEN:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True
