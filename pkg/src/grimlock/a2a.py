"""Guard proxy state machine and the post-handshake authorization gate.

Per flow, the initiating guard

1. reuses, resumes or establishes the long-lived control channel to the
   destination host, and opens a per-flow data channel (resumed from the
   cached peer context whenever possible);
2. draws a fresh nonce, sends AUTH_INIT and computes the channel binding
   over the data channel;
3. receives the destination's evidence, returns its own, and asks the
   verifier to appraise both and mint a Scope Token;
4. sends AUTH_GRANT; the destination validates the token against its own
   channel binding and only then opens the release gate.

Payload bytes reach a destination sandbox only through an open gate.
"""

from __future__ import annotations

import random
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import channel as ch
from .attestation import Evidence, attest
from .channel import ChannelConfig, ChannelHandle, PeerContext, Side, Transport
from .core import (
    HostIdentity,
    Reader,
    SandboxIdentity,
    audience_for,
    keypair_from_seed,
    read_scope,
    scope_canonical_bytes,
    u16,
)
from .errors import (
    AuthorizationDenied,
    DefaultDeny,
    GrimlockError,
    HandshakeAuthFailure,
    MalformedEvidence,
    MalformedToken,
    NotEstablished,
    ProtocolError,
    RecordAuthFailure,
    StalePeerContext,
    TokenError,
    TransportClosed,
    UnknownSandbox,
    UnsupportedVersion,
    reason_code,
    reason_name,
)
from .frames import (
    BindingContext,
    ChannelBinding,
    ControlFrame,
    Field,
    FrameType,
    compute_cb,
    decode_destination,
    encode_destination,
    frame_decode,
    frame_encode,
    make_frame,
    tlv_map,
)
from .mediation import AuthState, FlowRecord, Mediator
from .tokens import ScopeToken, TrustAnchors, validate
from .tokens import decode as decode_token
from .trace import EventTrace

GATE_CLOSED = "CLOSED"
GATE_OPEN = "OPEN"


class Clock:
    """Logical clock in unix seconds, advanced explicitly."""

    def __init__(self, start: int = 0):
        self.t = int(start)

    def now(self) -> int:
        return self.t

    def advance(self, seconds: int) -> int:
        self.t += int(seconds)
        return self.t


# -- actions returned by Guard.handle_frame ----------------------------------

@dataclass(frozen=True)
class Send:
    peer: str
    frame: ControlFrame


@dataclass(frozen=True)
class GateOpen:
    flow_id: bytes
    cb_hash: bytes
    token_id: bytes


@dataclass(frozen=True)
class GateClose:
    flow_id: bytes


@dataclass(frozen=True)
class Emit:
    kind: str
    flow_id: bytes
    fields: tuple[tuple[str, object], ...] = ()


@dataclass(frozen=True)
class FlushPayload:
    flow_id: bytes


Action = Union[Send, GateOpen, GateClose, Emit, FlushPayload]


def emit(kind: str, flow_id: bytes, **fields) -> Emit:
    return Emit(kind, flow_id, tuple(fields.items()))


# -- per-flow protocol state --------------------------------------------------

@dataclass
class OutboundFlow:
    record: FlowRecord
    peer: str
    data: Optional[ChannelHandle] = None
    ctx: Optional[BindingContext] = None
    binding: Optional[ChannelBinding] = None
    own_evidence: Optional[Evidence] = None
    peer_evidence: Optional[Evidence] = None
    token: Optional[ScopeToken] = None
    buffered: list[bytes] = field(default_factory=list)

    @property
    def flow_id(self) -> bytes:
        return self.record.flow_id

    @property
    def state(self) -> AuthState:
        return self.record.auth_state


@dataclass
class InboundFlow:
    flow_id: bytes
    peer: str
    dst: SandboxIdentity
    ctx: BindingContext
    data: Optional[ChannelHandle] = None
    binding: Optional[ChannelBinding] = None
    peer_evidence: Optional[Evidence] = None
    token_id: Optional[bytes] = None
    state: str = "PENDING"
    delivered: int = 0


@dataclass
class Endpoint:
    transport: Transport
    side: Side
    guard: "Guard"
    handle: ChannelHandle
    kind: str  # "control" | "data"


TransportHook = Callable[[Transport, str, str, str, str], None]
FrameHook = Callable[["Guard", str, ControlFrame], Optional[ControlFrame]]


class Fabric:
    """Simulated network joining guards: routing, transports, delivery, events."""

    def __init__(self, clock: Clock | None = None, trace: EventTrace | None = None):
        self.clock = clock or Clock()
        self.trace = trace if trace is not None else EventTrace()
        self.guards: dict[str, Guard] = {}
        self.diversions: dict[tuple[str, str], str] = {}
        self.transport_hooks: list[TransportHook] = []
        self.frame_hooks: list[FrameHook] = []
        self.endpoints: list[Endpoint] = []
        self.transports: list[Transport] = []
        self.establishments = 0
        self._ip_owner: dict[str, str] = {}
        self._pumping = False

    def add_guard(self, guard: "Guard") -> None:
        if guard.host_id in self.guards:
            raise ValueError(f"duplicate host {guard.host_id}")
        self.guards[guard.host_id] = guard

    def assign_ip(self, ip, host_id: str) -> None:
        self._ip_owner[str(ip)] = host_id

    def host_of_ip(self, ip) -> str | None:
        return self._ip_owner.get(str(ip))

    def guard_for(self, src_host: str, dst_host: str) -> "Guard | None":
        return self.guards.get(self.diversions.get((src_host, dst_host), dst_host))

    def finalize(self, enrolled: list[str] | None = None) -> None:
        """Distribute trust anchors (the enrolled guards' keys) and channel configs."""
        names = enrolled if enrolled is not None else list(self.guards)
        anchors = frozenset(self.guards[n].identity.guard_pubkey for n in names)
        for g in self.guards.values():
            g.configure(anchors)

    def new_transport(self, src: "Guard", dst: "Guard", intended: str, purpose: str) -> Transport:
        t = Transport(f"{purpose}:{src.host_id}->{dst.host_id}#{len(self.transports)}")
        self.transports.append(t)
        for hook in self.transport_hooks:
            hook(t, src.host_id, intended, dst.host_id, purpose)
        return t

    def attach(self, transport: Transport, side: Side, guard: "Guard", handle: ChannelHandle,
               kind: str) -> None:
        self.endpoints.append(Endpoint(transport, side, guard, handle, kind))

    def pump(self, limit: int = 1_000_000) -> None:
        """Deliver pending records until every transport is drained."""
        if self._pumping:
            return
        self._pumping = True
        try:
            steps = 0
            progressed = True
            while progressed:
                progressed = False
                self.endpoints = [ep for ep in self.endpoints if not ep.transport.closed]
                for ep in list(self.endpoints):
                    while not ep.transport.closed and ep.transport.pending(ep.side):
                        ep.guard.on_readable(ep.handle, ep.kind)
                        progressed = True
                        steps += 1
                        if steps > limit:
                            raise RuntimeError("fabric did not quiesce")
        finally:
            self._pumping = False

    def emit(self, kind: str, flow_id: bytes | None, **fields):
        return self.trace.emit(kind, flow_id, self.clock.now(), **fields)


class Guard:
    """Per-host guard proxy: mediation point, A2A endpoint and release gate."""

    def __init__(self, host_id: str, signing_seed: bytes, attester_seed: bytes, fabric: Fabric,
                 verifier=None, rng_seed: int = 0, flow_ttl: int = 300):
        self.signing_key, pub = keypair_from_seed(signing_seed)
        self.identity = HostIdentity(host_id, pub)
        self.attester_key, self.attester_pubkey = keypair_from_seed(attester_seed)
        self.rng = random.Random(rng_seed)
        self.fabric = fabric
        self.verifier = verifier
        self.mediator = Mediator(host_id, flow_ttl, on_bypass=self._on_bypass,
                                 flow_id_source=lambda: self.rng.randbytes(16))
        self.cfg: ChannelConfig | None = None
        self.token_anchors: TrustAnchors | None = verifier.anchors if verifier else None
        self.controls: dict[str, ChannelHandle] = {}
        self.peer_contexts: dict[str, PeerContext] = {}
        self.outbound: dict[bytes, OutboundFlow] = {}
        self.inbound: dict[bytes, InboundFlow] = {}
        self.gates: dict[bytes, str] = {}
        self.inboxes: dict[SandboxIdentity, list[bytes]] = defaultdict(list)
        self.counters: Counter = Counter()
        self._control_keys: dict[int, str] = {}
        self._data_flow: dict[int, bytes] = {}
        self._data_by_flow: dict[bytes, ChannelHandle] = {}
        self._gate_lock = threading.Lock()
        fabric.add_guard(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.host_id!r})"

    @property
    def host_id(self) -> str:
        return self.identity.host_id

    @property
    def now(self) -> int:
        return self.fabric.clock.now()

    def configure(self, trust_anchors: frozenset[bytes]) -> None:
        self.cfg = ChannelConfig(self.identity, self.signing_key, trust_anchors,
                                 self.rng.getrandbits(64))

    def _emit(self, kind: str, flow_id: bytes | None, **fields) -> None:
        self.fabric.emit(kind, flow_id, host=self.host_id, **fields)

    # -- sandbox-facing API ---------------------------------------------------

    def connect(self, sandbox: SandboxIdentity, dst_ip, dst_port: int,
                dns_name: str | None = None) -> FlowRecord:
        """A sandbox ``connect()``: interposed, then authorized before any byte moves."""
        try:
            flow = self.mediator.intercept_connect(sandbox, dst_ip, dst_port, self.now, dns_name)
        except (DefaultDeny, UnknownSandbox) as exc:
            fid = self.rng.randbytes(16)
            self._emit("SANDBOX_CONNECT", fid, src=getattr(sandbox, "ref", sandbox),
                       dst=f"{dst_ip}:{dst_port}")
            self._emit("FLOW_DENIED", fid, reason=exc.reason)
            raise
        self._emit("SANDBOX_CONNECT", flow.flow_id, src=sandbox.ref, dst=f"{dst_ip}:{dst_port}",
                   scope=flow.requested_scope)
        self.open_flow(flow)
        return flow

    def direct_egress(self, src, dst_ip, dst_port: int, payload: bytes = b"") -> None:
        """Any egress not issued through connect(); always refused."""
        self.mediator.block_direct(src, dst_ip, dst_port)

    def _on_bypass(self, ref: str, ip: str, port: int) -> None:
        self._emit("BYPASS_ATTEMPT", None, src=ref, dst=f"{ip}:{port}", bytes=0)

    def send_payload(self, flow_id: bytes, payload: bytes) -> int:
        out = self.outbound[flow_id]
        if out.state is AuthState.AUTHORIZED:
            ch.send(out.data, payload)
            self.fabric.pump()
            return len(payload)
        if out.state is AuthState.PENDING_AUTH:
            out.buffered.append(bytes(payload))
        else:
            self.counters["dropped_bytes"] += len(payload)
        return 0

    def close_flow(self, flow_id: bytes) -> None:
        out = self.outbound[flow_id]
        if out.state is AuthState.CLOSED:
            return
        if out.state is AuthState.PENDING_AUTH:
            self._deny_outbound(out, "TransportClosed")
        if out.state is AuthState.AUTHORIZED:
            self._try_send(out.peer, make_frame(FrameType.FLOW_CLOSE, [(Field.FLOW_ID, flow_id)]))
        self.mediator.flows.transition(out.record, AuthState.CLOSED)
        self._emit("FLOW_CLOSED", flow_id)
        self.fabric.pump()
        if out.data is not None:
            out.data.transport.close()

    # -- channel management ---------------------------------------------------

    def _connect_channel(self, dst_host: str, purpose: str) -> tuple[ChannelHandle, ChannelHandle, "Guard", str]:
        peer = self.fabric.guard_for(self.host_id, dst_host)
        if peer is None or peer.cfg is None:
            raise TransportClosed(f"no route to {dst_host}")
        ctx = self.peer_contexts.get(dst_host)
        if ctx is not None:
            t = self.fabric.new_transport(self, peer, dst_host, purpose)
            try:
                hi, hr = ch.resume(self.cfg, ctx, peer.cfg, t)
                how = "resumed"
            except StalePeerContext:
                del self.peer_contexts[dst_host]
                t.close()
                ctx = None
        if ctx is None:
            t = self.fabric.new_transport(self, peer, dst_host, purpose)
            hi, hr = ch.establish(self.cfg, peer.cfg, t)
            self.fabric.establishments += 1
            self.peer_contexts[dst_host] = ch.peer_context(hi, self.now)
            how = "new"
        self.fabric.attach(t, Side.INITIATOR, self, hi, purpose)
        self.fabric.attach(t, Side.RESPONDER, peer, hr, purpose)
        return hi, hr, peer, how

    def _ensure_control(self, dst_host: str) -> tuple[ChannelHandle, str]:
        h = self.controls.get(dst_host)
        if h is not None and h.established and not h.closed:
            return h, "reused"
        hi, hr, peer, how = self._connect_channel(dst_host, "control")
        self._adopt_control(dst_host, hi)
        peer._adopt_control(hr.peer.host_id, hr)
        return hi, how

    def _adopt_control(self, key: str, handle: ChannelHandle) -> None:
        self.controls[key] = handle
        self._control_keys[id(handle)] = key

    def _open_data(self, dst_host: str, flow_id: bytes) -> ChannelHandle:
        hi, hr, peer, _ = self._connect_channel(dst_host, "data")
        self._data_flow[id(hi)] = flow_id
        ch.send(hi, frame_encode(make_frame(FrameType.HELLO, [
            (Field.FLOW_ID, flow_id), (Field.HOST_IDENTITY, self.identity.encode())])))
        return hi

    def _try_send(self, peer: str, frame: ControlFrame) -> bool:
        handle = self.controls.get(peer)
        if handle is None or handle.closed or not handle.established:
            self.counters["unsendable_frames"] += 1
            return False
        ch.send(handle, frame_encode(frame))
        return True

    # -- initiator side -------------------------------------------------------

    def open_flow(self, flow: FlowRecord) -> AuthState:
        """Run the authorization protocol for a PENDING_AUTH flow to completion."""
        dst_host = self.fabric.host_of_ip(flow.key.dst_ip)
        out = OutboundFlow(flow, dst_host or "")
        self.outbound[flow.flow_id] = out
        if dst_host is None:
            self._deny_outbound(out, "DefaultDeny")
            return flow.auth_state
        try:
            _, how = self._ensure_control(dst_host)
            out.data = self._open_data(dst_host, flow.flow_id)
        except (HandshakeAuthFailure, StalePeerContext, TransportClosed, NotEstablished) as exc:
            self._deny_outbound(out, exc.reason)
            return flow.auth_state
        flow.channel_id = out.data.channel_id
        self._emit("HANDSHAKE_DONE", flow.flow_id, peer=out.data.peer.host_id,
                   channel=out.data.channel_id, control=how)
        out.ctx = BindingContext(self._draw_nonce(out), audience_for(dst_host),
                                 flow.requested_scope)
        out.binding = compute_cb(out.data, out.ctx)
        self._emit("CB_COMPUTED", flow.flow_id, cb=out.binding.cb_hash)
        self._try_send(dst_host, make_frame(FrameType.AUTH_INIT, [
            (Field.FLOW_ID, flow.flow_id),
            (Field.NONCE, out.ctx.nonce),
            (Field.AUDIENCE, out.ctx.audience.encode()),
            (Field.SCOPE, scope_canonical_bytes(out.ctx.scope)),
            (Field.DESTINATION, encode_destination(flow.key.dst_ip, flow.key.dst_port)),
        ]))
        self.fabric.pump()
        if flow.auth_state is AuthState.PENDING_AUTH:
            self._deny_outbound(out, "ProtocolError")
        return flow.auth_state

    def _draw_nonce(self, out: OutboundFlow) -> bytes:
        return self.rng.randbytes(32)

    def _evidence_for_verifier(self, out: OutboundFlow, own: Evidence,
                               peer: Evidence) -> tuple[Evidence, Evidence]:
        return own, peer

    def _grant_token_bytes(self, out: OutboundFlow, token: ScopeToken) -> bytes:
        return token.encode()

    def _deny_outbound(self, out: OutboundFlow, reason: str) -> None:
        if out.state is AuthState.PENDING_AUTH:
            self.mediator.flows.transition(out.record, AuthState.DENIED, reason)
            self._emit("FLOW_DENIED", out.flow_id, reason=reason)

    def _deny_actions(self, out: OutboundFlow, reason: str) -> list[Action]:
        if out.state is not AuthState.PENDING_AUTH:
            return []
        self.mediator.flows.transition(out.record, AuthState.DENIED, reason)
        return [emit("FLOW_DENIED", out.flow_id, reason=reason),
                Send(out.peer, _deny_frame(out.flow_id, reason))]

    def _on_peer_evidence(self, out: OutboundFlow, fields: dict[int, bytes], now: int) -> list[Action]:
        if out.state is not AuthState.PENDING_AUTH or out.peer_evidence is not None:
            return []
        try:
            peer_ev = Evidence.decode(_required(fields, Field.EVIDENCE))
        except MalformedEvidence:
            return self._deny_actions(out, "MalformedEvidence")
        out.peer_evidence = peer_ev
        src = out.record.key.src_sandbox
        own = attest(self.attester_key, self.host_id, src.measurement, out.binding.cb_hash,
                     out.ctx.nonce, (("role", "initiator"), ("subject", src.ref)))
        out.own_evidence = own
        actions: list[Action] = [
            Send(out.peer, make_frame(FrameType.AUTH_EVIDENCE, [
                (Field.FLOW_ID, out.flow_id), (Field.EVIDENCE, own.encode())])),
            emit("EVIDENCE_SENT", out.flow_id, attester=self.host_id, cb=own.cb_hash),
        ]
        ini, resp = self._evidence_for_verifier(out, own, peer_ev)
        try:
            auth = self.verifier.authorize(ini, resp, out.ctx, out.binding.cb_hash, now)
        except AuthorizationDenied as exc:
            return actions + self._deny_actions(out, exc.reason)
        token = out.token = auth.token
        actions += [
            emit("EVIDENCE_VERIFIED", out.flow_id, cb=out.binding.cb_hash,
                 measurement=auth.responder.measurement.hex()[:16]),
            emit("TOKEN_MINTED", out.flow_id, token=token.token_id, subject=token.subject,
                 scope=token.scope, max=auth.initiator.max_scope, exp=token.exp),
            Send(out.peer, make_frame(FrameType.AUTH_GRANT, [
                (Field.FLOW_ID, out.flow_id), (Field.TOKEN, self._grant_token_bytes(out, token))])),
        ]
        return actions

    def _on_grant_ack(self, out: OutboundFlow) -> list[Action]:
        if out.state is not AuthState.PENDING_AUTH:
            return []
        self.mediator.flows.transition(out.record, AuthState.AUTHORIZED)
        ch.enable_offload(out.data)
        return [FlushPayload(out.flow_id)]

    # -- responder side -------------------------------------------------------

    def _on_auth_init(self, peer: str, flow_id: bytes, fields: dict[int, bytes]) -> list[Action]:
        if flow_id in self.inbound:
            raise ProtocolError("duplicate AUTH_INIT")
        nonce = _required(fields, Field.NONCE)
        audience = _required(fields, Field.AUDIENCE).decode("utf-8", "replace")
        scope = read_scope(Reader(_required(fields, Field.SCOPE), ProtocolError))
        dst_ip, dst_port = decode_destination(_required(fields, Field.DESTINATION))
        if len(nonce) != 32:
            raise ProtocolError("nonce must be 32 bytes")
        if audience != self.identity.audience:
            return [emit("FLOW_DENIED", flow_id, reason="AudienceMismatch"),
                    Send(peer, _deny_frame(flow_id, "AudienceMismatch"))]
        dst = self.mediator.sandbox_at(dst_ip)
        if dst is None:
            return [emit("FLOW_DENIED", flow_id, reason="UnknownSandbox"),
                    Send(peer, _deny_frame(flow_id, "UnknownSandbox"))]
        inb = InboundFlow(flow_id, peer, dst, BindingContext(nonce, audience, scope))
        self.inbound[flow_id] = inb
        self.gates[flow_id] = GATE_CLOSED
        return self._maybe_attest(inb)

    def _maybe_attest(self, inb: InboundFlow) -> list[Action]:
        data = self._data_by_flow.get(inb.flow_id)
        if inb.binding is not None or data is None or inb.state != "PENDING":
            return []
        if data.peer.host_id != inb.peer:
            inb.state = "DENIED"
            return [Send(inb.peer, _deny_frame(inb.flow_id, "ProtocolError"))]
        inb.data = data
        inb.binding = compute_cb(data, inb.ctx)
        ev = attest(self.attester_key, self.host_id, inb.dst.measurement, inb.binding.cb_hash,
                    inb.ctx.nonce, (("role", "responder"), ("subject", inb.dst.ref)))
        return [
            emit("CB_COMPUTED", inb.flow_id, cb=inb.binding.cb_hash),
            Send(inb.peer, make_frame(FrameType.AUTH_EVIDENCE, [
                (Field.FLOW_ID, inb.flow_id), (Field.EVIDENCE, ev.encode())])),
            emit("EVIDENCE_SENT", inb.flow_id, attester=self.host_id, cb=ev.cb_hash),
        ]

    def _on_grant(self, inb: InboundFlow, fields: dict[int, bytes], now: int) -> list[Action]:
        if inb.state != "PENDING":
            return []
        token = None
        try:
            token = decode_token(_required(fields, Field.TOKEN))
            if inb.binding is None:
                raise TokenError("no local channel binding for this flow")
            validate(token, self.token_anchors, self.identity.audience, inb.binding.cb_hash,
                     inb.ctx.scope, now)
        except (TokenError, MalformedToken, UnsupportedVersion) as exc:
            reason = "BindingMismatch" if type(exc) is TokenError else exc.reason
            inb.state = "DENIED"
            return [emit("TOKEN_REJECTED", inb.flow_id, reason=reason,
                         token=token.token_id if token else None),
                    Send(inb.peer, _deny_frame(inb.flow_id, reason))]
        inb.state = "AUTHORIZED"
        inb.token_id = token.token_id
        return [
            emit("TOKEN_VALID", inb.flow_id, token=token.token_id, cb=inb.binding.cb_hash,
                 scope=token.scope),
            GateOpen(inb.flow_id, inb.binding.cb_hash, token.token_id),
            Send(inb.peer, make_frame(FrameType.AUTH_GRANT, [(Field.FLOW_ID, inb.flow_id)])),
        ]

    # -- frame dispatch -------------------------------------------------------

    def handle_frame(self, frame: ControlFrame, now: int, peer: str) -> list[Action]:
        """One deterministic state-machine step for a frame received from ``peer``.

        Raises ProtocolError for unknown types, malformed payloads or frames
        naming a flow this guard does not share with ``peer``.
        """
        try:
            ftype = FrameType(frame.type)
        except ValueError:
            raise ProtocolError(f"unknown frame type 0x{frame.type:02x}") from None
        fields = tlv_map(frame.payload)
        if ftype is FrameType.HELLO:
            return []
        flow_id = _required(fields, Field.FLOW_ID)
        if len(flow_id) != 16:
            raise ProtocolError("flow_id must be 16 bytes")
        if ftype is FrameType.AUTH_INIT:
            return self._on_auth_init(peer, flow_id, fields)

        out = self.outbound.get(flow_id)
        out = out if out is not None and out.peer == peer else None
        inb = self.inbound.get(flow_id)
        inb = inb if inb is not None and inb.peer == peer else None
        if out is None and inb is None:
            raise ProtocolError(f"frame for unknown flow {flow_id.hex()}")

        if ftype is FrameType.AUTH_EVIDENCE:
            if out is not None:
                return self._on_peer_evidence(out, fields, now)
            try:
                inb.peer_evidence = Evidence.decode(_required(fields, Field.EVIDENCE))
            except MalformedEvidence:
                pass
            return []
        if ftype is FrameType.AUTH_GRANT:
            if inb is not None and Field.TOKEN in fields:
                return self._on_grant(inb, fields, now)
            if out is not None and Field.TOKEN not in fields:
                return self._on_grant_ack(out)
            raise ProtocolError("AUTH_GRANT in the wrong direction")
        if ftype is FrameType.AUTH_DENY:
            code = _required(fields, Field.DENY_REASON)
            reason = reason_name(int.from_bytes(code, "big")) if len(code) == 2 else "ProtocolError"
            if out is not None:
                if out.state is AuthState.PENDING_AUTH:
                    self.mediator.flows.transition(out.record, AuthState.DENIED, reason)
                    return [emit("FLOW_DENIED", flow_id, reason=reason)]
                return []
            if inb.state != "CLOSED":
                inb.state = "DENIED"
            return [GateClose(flow_id)]
        # FLOW_CLOSE
        if inb is not None:
            inb.state = "CLOSED"
            return [GateClose(flow_id)]
        return []

    def apply(self, actions: list[Action]) -> None:
        for a in actions:
            if isinstance(a, Send):
                self._try_send(a.peer, a.frame)
            elif isinstance(a, Emit):
                self._emit(a.kind, a.flow_id, **dict(a.fields))
            elif isinstance(a, GateOpen):
                self._open_gate(a)
            elif isinstance(a, GateClose):
                with self._gate_lock:
                    if a.flow_id in self.gates:
                        self.gates[a.flow_id] = GATE_CLOSED
            elif isinstance(a, FlushPayload):
                out = self.outbound[a.flow_id]
                pending, out.buffered = out.buffered, []
                for payload in pending:
                    ch.send(out.data, payload)

    def _open_gate(self, a: GateOpen) -> bool:
        with self._gate_lock:
            if self.gates.get(a.flow_id) == GATE_OPEN:
                return False
            self.gates[a.flow_id] = GATE_OPEN
        self._emit("GATE_OPEN", a.flow_id, token=a.token_id, cb=a.cb_hash)
        inb = self.inbound[a.flow_id]
        if inb.data is not None and inb.data.established:
            ch.enable_offload(inb.data)
        return True

    # -- record delivery ------------------------------------------------------

    def on_readable(self, handle: ChannelHandle, kind: str) -> None:
        try:
            data = ch.recv(handle)
        except RecordAuthFailure:
            # tampered, replayed or cross-channel record: discarded, never surfaced
            self.counters["record_auth_failures"] += 1
            return
        except TransportClosed:
            return
        if data is None:
            return
        if kind == "control":
            self._on_control_record(handle, data)
        else:
            self._on_data(handle, data)

    def _on_control_record(self, handle: ChannelHandle, data: bytes) -> None:
        peer = self._control_keys.get(id(handle), handle.peer.host_id)
        try:
            frame = frame_decode(data)
            for hook in self.fabric.frame_hooks:
                frame = hook(self, peer, frame)
                if frame is None:
                    return
            actions = self.handle_frame(frame, self.now, peer)
        except (ProtocolError, UnsupportedVersion) as exc:
            self._connection_failure(peer, exc)
            return
        self.apply(actions)

    def _connection_failure(self, peer: str, exc: GrimlockError) -> None:
        """Connection-scoped failure: every flow shared with ``peer`` is denied."""
        self.counters["protocol_errors"] += 1
        handle = self.controls.pop(peer, None)
        if handle is not None:
            handle.transport.close()
        for out in self.outbound.values():
            if out.peer == peer:
                self._deny_outbound(out, "ProtocolError")
        for inb in self.inbound.values():
            if inb.peer == peer and inb.state in ("PENDING", "AUTHORIZED"):
                inb.state = "DENIED"
                with self._gate_lock:
                    self.gates[inb.flow_id] = GATE_CLOSED

    def _on_data(self, handle: ChannelHandle, data: bytes) -> None:
        fid = self._data_flow.get(id(handle))
        if fid is None:
            try:
                frame = frame_decode(data)
                fields = tlv_map(frame.payload)
                fid = fields[Field.FLOW_ID] if frame.type == FrameType.HELLO else None
            except (ProtocolError, UnsupportedVersion, KeyError):
                fid = None
            if fid is None or len(fid) != 16:
                self.counters["bad_data_hello"] += 1
                return
            self._data_flow[id(handle)] = fid
            self._data_by_flow[fid] = handle
            inb = self.inbound.get(fid)
            if inb is not None:
                self.apply(self._maybe_attest(inb))
            return
        inb = self.inbound.get(fid)
        with self._gate_lock:
            open_ = inb is not None and self.gates.get(fid) == GATE_OPEN and inb.data is handle
        if not open_:
            self.counters["gated_bytes_dropped"] += len(data)
            return
        first = inb.delivered == 0
        self.inboxes[inb.dst].append(data)
        inb.delivered += len(data)
        self._emit("FIRST_PLAINTEXT" if first else "PLAINTEXT", fid, dst=inb.dst.ref,
                   bytes=len(data))


def _required(fields: dict[int, bytes], key: Field) -> bytes:
    try:
        return fields[key]
    except KeyError:
        raise ProtocolError(f"missing TLV field {key.name}") from None


def _deny_frame(flow_id: bytes, reason: str) -> ControlFrame:
    return make_frame(FrameType.AUTH_DENY, [(Field.FLOW_ID, flow_id),
                                            (Field.DENY_REASON, u16(reason_code(reason)))])


def open_flow(guard: Guard, flow: FlowRecord) -> AuthState:
    return guard.open_flow(flow)


def handle_frame(guard: Guard, frame: ControlFrame, now: int, peer: str) -> list[Action]:
    return guard.handle_frame(frame, now, peer)
