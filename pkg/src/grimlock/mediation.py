"""Sandbox-boundary interposition (simulated stand-in for the eBPF layer).

The only egress API a simulated sandbox has is :meth:`Mediator.intercept_connect`;
anything else is routed to :meth:`Mediator.block_direct`, which always
refuses. In a kernel deployment the same roles are played by a connect-time
hook, a per-packet egress hook, and a shared map keyed like :class:`FlowKey`
whose value holds the verdict and the local guard's redirect address.
"""

from __future__ import annotations

import enum
import ipaddress
import re
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .core import (
    Digest,
    SandboxIdentity,
    Scope,
    digest,
    lp16,
    scope_canonical_bytes,
    scope_hash,
    u16,
)
from .errors import (
    BypassBlocked,
    DefaultDeny,
    DuplicateSandbox,
    InvalidTransition,
    MeasurementMismatch,
    UnknownSandbox,
)

DEFAULT_FLOW_TTL = 300


def _ip(value) -> ipaddress.IPv4Address:
    return ipaddress.IPv4Address(value)


@dataclass(frozen=True)
class ScopeRule:
    pattern: str  # "host:port", '*' allowed in the host part only
    scope: Scope

    def __post_init__(self):
        host, sep, port = self.pattern.rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 0xFFFF:
            raise ValueError(f"bad destination pattern {self.pattern!r}")

    def matches(self, host: str, port: int) -> bool:
        pat_host, _, pat_port = self.pattern.rpartition(":")
        if int(pat_port) != port:
            return False
        regex = ".*".join(re.escape(part) for part in pat_host.split("*"))
        return re.fullmatch(regex, host) is not None


@dataclass(frozen=True)
class SandboxManifest:
    host_id: str
    sandbox_id: str
    scope_rules: tuple[ScopeRule, ...]

    def canonical_bytes(self) -> bytes:
        out = lp16(self.host_id) + lp16(self.sandbox_id) + u16(len(self.scope_rules))
        for rule in self.scope_rules:
            out += lp16(rule.pattern) + scope_canonical_bytes(rule.scope)
        return out

    @property
    def measurement(self) -> Digest:
        return digest(self.canonical_bytes())

    @property
    def identity(self) -> SandboxIdentity:
        return SandboxIdentity(self.host_id, self.sandbox_id, self.measurement)


def resolve_scope(manifest: SandboxManifest, dst_ip, dst_port: int,
                  dns_name: str | None = None) -> Scope:
    """First matching rule wins; the name is matched when given, else the IP literal."""
    host = dns_name if dns_name else str(_ip(dst_ip))
    for rule in manifest.scope_rules:
        if rule.matches(host, dst_port):
            return rule.scope
    raise DefaultDeny(f"no rule for {host}:{dst_port} in {manifest.host_id}/{manifest.sandbox_id}")


@dataclass(frozen=True)
class FlowKey:
    src_sandbox: SandboxIdentity
    src_ip: ipaddress.IPv4Address
    dst_ip: ipaddress.IPv4Address
    dst_port: int


class AuthState(enum.Enum):
    PENDING_AUTH = "PENDING_AUTH"
    AUTHORIZED = "AUTHORIZED"
    DENIED = "DENIED"
    CLOSED = "CLOSED"


_ALLOWED = {
    AuthState.PENDING_AUTH: {AuthState.AUTHORIZED, AuthState.DENIED},
    AuthState.AUTHORIZED: {AuthState.CLOSED},
    AuthState.DENIED: {AuthState.CLOSED},
    AuthState.CLOSED: set(),
}


@dataclass
class FlowRecord:
    key: FlowKey
    flow_id: bytes
    requested_scope: Scope
    requested_scope_hash: Digest
    expiry: int
    auth_state: AuthState = AuthState.PENDING_AUTH
    channel_id: Optional[bytes] = None
    dns_name: Optional[str] = None
    deny_reason: Optional[str] = None


class FlowTable:
    """Per-host flow state with atomic state transitions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_key: dict[FlowKey, FlowRecord] = {}

    def insert(self, record: FlowRecord) -> None:
        with self._lock:
            self._by_key[record.key] = record

    def lookup(self, key: FlowKey) -> FlowRecord | None:
        with self._lock:
            return self._by_key.get(key)

    def by_flow_id(self, flow_id: bytes) -> FlowRecord | None:
        with self._lock:
            for rec in self._by_key.values():
                if rec.flow_id == flow_id:
                    return rec
        return None

    def transition(self, record: FlowRecord, new: AuthState, reason: str | None = None) -> bool:
        """Move ``record`` to ``new``. Returns False if it already is there.

        Raises InvalidTransition for moves outside
        PENDING_AUTH -> {AUTHORIZED, DENIED} -> CLOSED.
        """
        with self._lock:
            if record.auth_state is new:
                return False
            if new not in _ALLOWED[record.auth_state]:
                raise InvalidTransition(f"{record.auth_state.value} -> {new.value}")
            record.auth_state = new
            if reason is not None:
                record.deny_reason = reason
            return True

    def evict_expired(self, now: int) -> int:
        with self._lock:
            dead = [k for k, r in self._by_key.items()
                    if r.expiry < now or r.auth_state in (AuthState.DENIED, AuthState.CLOSED)]
            for k in dead:
                del self._by_key[k]
            return len(dead)

    def __len__(self) -> int:
        with self._lock:
            return len(self._by_key)

    def records(self) -> list[FlowRecord]:
        with self._lock:
            return list(self._by_key.values())


@dataclass
class _Registered:
    manifest: SandboxManifest
    ip: ipaddress.IPv4Address


class Mediator:
    """Mandatory mediation point for one host's sandboxes."""

    def __init__(self, host_id: str, flow_ttl: int = DEFAULT_FLOW_TTL,
                 on_bypass: Callable[[str, str, int], None] | None = None,
                 flow_id_source: Callable[[], bytes] | None = None):
        self.host_id = host_id
        self.flow_ttl = flow_ttl
        self.flows = FlowTable()
        self.bypass_attempts = 0
        self.bypass_bytes_delivered = 0
        self._on_bypass = on_bypass
        self._sandboxes: dict[SandboxIdentity, _Registered] = {}
        self._by_ip: dict[ipaddress.IPv4Address, SandboxIdentity] = {}
        self._flow_id_source = flow_id_source
        self._flow_counter = 0
        self._lock = threading.Lock()

    def register_sandbox(self, manifest: SandboxManifest, identity: SandboxIdentity | None = None,
                         ip=None) -> SandboxIdentity:
        identity = identity or manifest.identity
        if (identity.host_id, identity.sandbox_id) != (manifest.host_id, manifest.sandbox_id):
            raise MeasurementMismatch("identity does not name this manifest")
        if identity.measurement != manifest.measurement:
            raise MeasurementMismatch(f"measurement mismatch for {identity.ref}")
        with self._lock:
            if any((s.host_id, s.sandbox_id) == (identity.host_id, identity.sandbox_id)
                   for s in self._sandboxes):
                raise DuplicateSandbox(identity.ref)
            if ip is None:
                ip = f"10.255.0.{len(self._sandboxes) + 1}"
            addr = _ip(ip)
            self._sandboxes[identity] = _Registered(manifest, addr)
            self._by_ip[addr] = identity
        return identity

    def manifest_of(self, sandbox: SandboxIdentity) -> SandboxManifest:
        reg = self._sandboxes.get(sandbox)
        if reg is None:
            raise UnknownSandbox(getattr(sandbox, "ref", str(sandbox)))
        return reg.manifest

    def ip_of(self, sandbox: SandboxIdentity) -> ipaddress.IPv4Address:
        reg = self._sandboxes.get(sandbox)
        if reg is None:
            raise UnknownSandbox(getattr(sandbox, "ref", str(sandbox)))
        return reg.ip

    def sandbox_at(self, ip) -> SandboxIdentity | None:
        return self._by_ip.get(_ip(ip))

    @property
    def sandboxes(self) -> list[SandboxIdentity]:
        return list(self._sandboxes)

    def _next_flow_id(self) -> bytes:
        if self._flow_id_source is not None:
            return self._flow_id_source()
        with self._lock:
            self._flow_counter += 1
            return digest(f"{self.host_id}/flow/{self._flow_counter}".encode())[:16]

    def resolve_scope(self, sandbox: SandboxIdentity, dst_ip, dst_port: int,
                      dns_name: str | None = None) -> Scope:
        return resolve_scope(self.manifest_of(sandbox), dst_ip, dst_port, dns_name)

    def intercept_connect(self, src: SandboxIdentity, dst_ip, dst_port: int, now: int,
                          dns_name: str | None = None) -> FlowRecord:
        reg = self._sandboxes.get(src)
        if reg is None:
            raise UnknownSandbox(getattr(src, "ref", str(src)))
        scope = resolve_scope(reg.manifest, dst_ip, dst_port, dns_name)
        key = FlowKey(src, reg.ip, _ip(dst_ip), int(dst_port))
        record = FlowRecord(key=key, flow_id=self._next_flow_id(), requested_scope=scope,
                            requested_scope_hash=scope_hash(scope), expiry=now + self.flow_ttl,
                            dns_name=dns_name)
        self.flows.insert(record)
        return record

    def block_direct(self, src: SandboxIdentity | str, dst_ip, dst_port: int) -> None:
        """Verdict for any egress that did not go through intercept_connect."""
        ref = getattr(src, "ref", str(src))
        with self._lock:
            self.bypass_attempts += 1
        if self._on_bypass is not None:
            self._on_bypass(ref, str(_ip(dst_ip)), int(dst_port))
        raise BypassBlocked(f"direct egress from {ref} to {dst_ip}:{dst_port} blocked")

    def flow_lookup(self, key: FlowKey) -> FlowRecord | None:
        return self.flows.lookup(key)

    def flow_evict_expired(self, now: int) -> int:
        return self.flows.evict_expired(now)
