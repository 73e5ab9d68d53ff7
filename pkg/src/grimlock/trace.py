"""Totally ordered simulation events, mirrored one-to-one into the audit log.

Serialized form, one event per line::

    seq=<u64> t=<u64> flow=<hex> kind=<NAME> [k=v ...]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .audit import AuditLog, AuditRecord

NO_FLOW = b"\x00" * 16

KINDS = (
    "SANDBOX_CONNECT", "BYPASS_ATTEMPT", "HANDSHAKE_DONE", "CB_COMPUTED", "EVIDENCE_SENT",
    "EVIDENCE_VERIFIED", "TOKEN_MINTED", "TOKEN_VALID", "TOKEN_REJECTED", "GATE_OPEN",
    "FIRST_PLAINTEXT", "PLAINTEXT", "FLOW_DENIED", "FLOW_CLOSED",
)

_DECISIONS = {
    "EVIDENCE_VERIFIED": "allow", "TOKEN_MINTED": "allow", "TOKEN_VALID": "allow",
    "GATE_OPEN": "allow", "TOKEN_REJECTED": "deny", "FLOW_DENIED": "deny",
    "BYPASS_ATTEMPT": "deny",
}


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    t: int
    flow_id: bytes
    kind: str
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    @property
    def flow(self) -> str:
        return self.flow_id.hex()

    def line(self) -> str:
        head = f"seq={self.seq} t={self.t} flow={self.flow} kind={self.kind}"
        return " ".join([head] + [f"{k}={v}" for k, v in self.fields])

    @classmethod
    def parse(cls, line: str) -> "TraceEvent":
        parts = line.split()
        kv = [p.split("=", 1) for p in parts]
        if len(kv) < 4 or any(len(p) != 2 for p in kv):
            raise ValueError(f"malformed trace line: {line!r}")
        if [k for k, _ in kv[:4]] != ["seq", "t", "flow", "kind"]:
            raise ValueError(f"malformed trace line: {line!r}")
        return cls(int(kv[0][1]), int(kv[1][1]), bytes.fromhex(kv[2][1]), kv[3][1],
                   tuple((k, v) for k, v in kv[4:]))


def _fmt(value) -> str:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    text = str(value)
    if any(c.isspace() for c in text) or "=" in text:
        raise ValueError(f"trace value {text!r} contains whitespace or '='")
    return text


class EventTrace:
    def __init__(self, audit: AuditLog | None = None):
        self.events: list[TraceEvent] = []
        self.audit = audit
        self._lock = threading.Lock()

    def emit(self, kind: str, flow_id: bytes | None, t: int, **fields) -> TraceEvent:
        flow_id = flow_id or NO_FLOW
        items = tuple((k, _fmt(v)) for k, v in fields.items() if v is not None)
        with self._lock:
            ev = TraceEvent(len(self.events), t, flow_id, kind, items)
            self.events.append(ev)
            if self.audit is not None:
                token = ev.get("token")
                self.audit.append(AuditRecord(ev.seq, t, flow_id, kind,
                                              _DECISIONS.get(kind, "info"),
                                              bytes.fromhex(token) if token else None,
                                              ev.get("reason")))
        return ev

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def for_flow(self, flow_id: bytes) -> list[TraceEvent]:
        return [e for e in self.events if e.flow_id == flow_id]

    def serialize(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)

    @classmethod
    def parse(cls, text: str) -> "EventTrace":
        trace = cls()
        trace.events = [TraceEvent.parse(line) for line in text.splitlines() if line.strip()]
        return trace
