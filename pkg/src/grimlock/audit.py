"""Hash-chained audit log.

``rec_hash[i] = H(rec_hash[i-1] || record_bytes[i])`` with a zero genesis
hash. Record bytes::

    seq u64 || timestamp u64 || flow_id[16] || lp16 kind
    || token_flag u8 || [token_id[16]] || lp16 decision || reason_flag u8 || [lp16 reason]

File layout: ``"GAUD" || version u8`` then, per record,
``len u32 || record_bytes || rec_hash[32]``.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Optional

from .core import DIGEST_LEN, ZERO_DIGEST, Digest, Reader, digest, lp16, u8, u32, u64

FILE_MAGIC = b"GAUD"
FILE_VERSION = 1
GENESIS = ZERO_DIGEST


class AuditFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    timestamp: int
    flow_id: bytes
    kind: str
    decision: str
    token_id: Optional[bytes] = None
    reason: Optional[str] = None

    def canonical_bytes(self) -> bytes:
        out = u64(self.seq) + u64(self.timestamp) + self.flow_id.ljust(16, b"\x00")[:16]
        out += lp16(self.kind)
        out += u8(0) if self.token_id is None else u8(1) + self.token_id
        out += lp16(self.decision)
        out += u8(0) if self.reason is None else u8(1) + lp16(self.reason)
        return out

    @classmethod
    def decode(cls, data: bytes) -> "AuditRecord":
        r = Reader(data, AuditFormatError)
        seq, ts, flow_id, kind = r.u64(), r.u64(), r.take(16), r.text()
        token_id = r.take(16) if r.u8() else None
        decision = r.text()
        reason = r.text() if r.u8() else None
        r.expect_end()
        return cls(seq, ts, flow_id, kind, decision, token_id, reason)


def chain_hash(prev: bytes, record_bytes: bytes) -> Digest:
    return digest(prev + record_bytes)


class AuditLog:
    """Append-only list of (record bytes, chain hash) entries."""

    def __init__(self):
        self.entries: list[tuple[bytes, Digest]] = []
        self._lock = threading.Lock()

    @property
    def head(self) -> Digest:
        return self.entries[-1][1] if self.entries else GENESIS

    def append(self, record: AuditRecord) -> "AuditLog":
        raw = record.canonical_bytes()
        with self._lock:
            self.entries.append((raw, chain_hash(self.head, raw)))
        return self

    def records(self) -> list[AuditRecord]:
        return [AuditRecord.decode(raw) for raw, _ in self.entries]

    def first_broken(self) -> int | None:
        prev = GENESIS
        for i, (raw, h) in enumerate(self.entries):
            if chain_hash(prev, raw) != h:
                return i
            prev = h
        return None

    def verify(self) -> bool:
        return self.first_broken() is None

    def __len__(self) -> int:
        return len(self.entries)

    def to_bytes(self) -> bytes:
        out = bytearray(FILE_MAGIC + u8(FILE_VERSION))
        for raw, h in self.entries:
            out += u32(len(raw)) + raw + h
        return bytes(out)


def audit_append(log: AuditLog, record: AuditRecord) -> AuditLog:
    return log.append(record)


def audit_verify(log: AuditLog | bytes) -> bool:
    """True iff every chain link recomputes; accepts a log or its serialized bytes."""
    if isinstance(log, (bytes, bytearray)):
        return verify_audit_bytes(bytes(log)) is None
    return log.verify()


def parse_audit_bytes(data: bytes) -> tuple[AuditLog, int | None]:
    """Best-effort parse; returns the log read so far and the index of the
    first entry that could not be framed (None if the whole file parsed)."""
    log = AuditLog()
    if data[:4] != FILE_MAGIC or len(data) < 5 or data[4] != FILE_VERSION:
        return log, 0
    pos = 5
    while pos < len(data):
        index = len(log.entries)
        if pos + 4 > len(data):
            return log, index
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        end = pos + 4 + n + DIGEST_LEN
        if end > len(data):
            return log, index
        raw = data[pos + 4:pos + 4 + n]
        log.entries.append((raw, Digest(data[pos + 4 + n:end])))
        pos = end
    return log, None


def verify_audit_bytes(data: bytes) -> int | None:
    """Index of the first broken link, or None if the serialized log is intact."""
    log, framing_error = parse_audit_bytes(data)
    broken = log.first_broken()
    if broken is not None:
        return broken
    if framing_error is not None:
        return framing_error
    for i, (raw, _) in enumerate(log.entries):
        try:
            AuditRecord.decode(raw)
        except AuditFormatError:
            return i
    return None


def load_audit(data: bytes) -> AuditLog:
    log, err = parse_audit_bytes(data)
    if err is not None:
        raise AuditFormatError(f"cannot frame audit entry {err}")
    return log
