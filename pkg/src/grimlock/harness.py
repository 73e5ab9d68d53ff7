"""Deterministic multi-host simulation with adversary models.

A :class:`Scenario` names hosts (each with a guard and up to 16 sandboxes),
an adversary, and a script of agent actions. :func:`run_scenario` executes
it under a logical clock and one seeded generator, then checks the trace.
The verdict is PASS iff every built-in invariant and every per-flow
expectation holds.
"""

from __future__ import annotations

import enum
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .a2a import Clock, Fabric, Guard, OutboundFlow, Send
from .attestation import AppraisalPolicy, Evidence
from .audit import AuditLog
from .channel import Side, Tap, Transport, bridge
from .core import (
    Scope,
    audience_for,
    digest,
    keypair_from_seed,
    scope_subset,
    sign,
)
from .errors import BypassBlocked, DefaultDeny, ScenarioConfigError, TokenError, UnknownSandbox
from .frames import ControlFrame, Field, FrameType, frame_decode, tlv_map
from .mediation import AuthState, SandboxManifest, ScopeRule
from .tokens import ScopeToken, TrustAnchors
from .trace import EventTrace, TraceEvent

MAX_SANDBOXES_PER_HOST = 16
CLOCK_START = 1_760_000_000
DELIVERY_KINDS = ("FIRST_PLAINTEXT", "PLAINTEXT")


class Adversary(enum.Enum):
    NONE = "NONE"
    REPLAY = "REPLAY"
    RELAY = "RELAY"
    MITM = "MITM"
    BYPASS = "BYPASS"
    SCOPE_ESCALATION = "SCOPE_ESCALATION"
    EXPIRED_TOKEN = "EXPIRED_TOKEN"


# -- scenario description -----------------------------------------------------

@dataclass(frozen=True)
class SandboxSpec:
    sandbox_id: str
    rules: tuple[ScopeRule, ...]


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    sandboxes: tuple[SandboxSpec, ...] = ()
    role: str = "guard"  # guard | relay | replay (the latter two are insiders)


@dataclass(frozen=True)
class Connect:
    label: str
    src: str  # sandbox ref "host/sandbox"
    dst: str  # sandbox ref or IPv4 literal
    port: int = 443
    dns_name: Optional[str] = None
    variant: Optional[str] = None


@dataclass(frozen=True)
class SendData:
    label: str
    nbytes: int


@dataclass(frozen=True)
class Close:
    label: str


@dataclass(frozen=True)
class DirectEgress:
    label: str
    src: str
    dst: str
    port: int = 443
    nbytes: int = 64


@dataclass(frozen=True)
class Advance:
    seconds: int


@dataclass(frozen=True)
class Delegate:
    label: str
    parent: str  # label of an authorized flow
    scope: Scope
    audience_host: str


@dataclass(frozen=True)
class Reinject:
    label: str
    host: str
    peer: str


ScriptAction = Union[Connect, SendData, Close, DirectEgress, Advance, Delegate, Reinject]


@dataclass
class Scenario:
    name: str
    seed: int
    hosts: list[HostSpec]
    adversary: Adversary = Adversary.NONE
    script: list[ScriptAction] = field(default_factory=list)
    policy: Optional[AppraisalPolicy] = None
    expect: dict[str, frozenset[str]] = field(default_factory=dict)
    token_ttl: int = 60
    clock_skew: int = 30
    diversions: dict[tuple[str, str], str] = field(default_factory=dict)

    def validate(self) -> None:
        names = [h.host_id for h in self.hosts]
        if len(set(names)) != len(names):
            raise ScenarioConfigError("duplicate host ids")
        refs = set()
        for h in self.hosts:
            if len(h.sandboxes) > MAX_SANDBOXES_PER_HOST:
                raise ScenarioConfigError(f"{h.host_id}: more than {MAX_SANDBOXES_PER_HOST} sandboxes")
            if h.role not in ("guard", "relay", "replay"):
                raise ScenarioConfigError(f"{h.host_id}: unknown role {h.role!r}")
            refs.update(f"{h.host_id}/{s.sandbox_id}" for s in h.sandboxes)
        labels: set[str] = set()
        for a in self.script:
            if isinstance(a, (Connect, DirectEgress, Delegate, Reinject)):
                if a.label in labels:
                    raise ScenarioConfigError(f"duplicate label {a.label!r}")
                labels.add(a.label)
            if isinstance(a, (Connect, DirectEgress)) and a.src not in refs:
                raise ScenarioConfigError(f"unknown source sandbox {a.src!r}")
            if isinstance(a, (SendData, Close)) and a.label not in labels:
                raise ScenarioConfigError(f"action on undefined flow {a.label!r}")
        for label in self.expect:
            if label not in labels:
                raise ScenarioConfigError(f"expectation for undefined label {label!r}")


def host_ip(host_index: int, sandbox_index: int) -> str:
    return f"10.0.{host_index}.{sandbox_index + 1}"


def manifest_for(host_id: str, spec: SandboxSpec) -> SandboxManifest:
    return SandboxManifest(host_id, spec.sandbox_id, spec.rules)


def default_policy(hosts: list[HostSpec], max_age: int = 120) -> AppraisalPolicy:
    """Allow every declared sandbox; grant each the union of its manifest's scopes."""
    allowed, grants = set(), {}
    for h in hosts:
        for s in h.sandboxes:
            m = manifest_for(h.host_id, s)
            allowed.add(m.measurement)
            scope = Scope()
            for rule in s.rules:
                scope = scope | rule.scope
            grants[m.measurement] = scope
    return AppraisalPolicy(frozenset(allowed), max_age, grants)


# -- trace properties ---------------------------------------------------------

def assert_trace_properties(trace: EventTrace | list[TraceEvent], check_scope: bool = True) -> list[str]:
    """Gate-safety and least-privilege checks over a complete trace.

    (a) delivery only after GATE_OPEN on the same host and flow;
    (b) GATE_OPEN only after TOKEN_VALID with the same cb;
    (c) delivered bytes belong to an intercepted flow;
    (d) minted scope within the stated maximum.
    """
    violations: list[str] = []
    opened: set[tuple[str, bytes]] = set()
    valid_cb: dict[tuple[str, bytes], set[str]] = {}
    intercepted: set[bytes] = set()
    for ev in trace:
        key = (ev.get("host", ""), ev.flow_id)
        if ev.kind == "SANDBOX_CONNECT":
            intercepted.add(ev.flow_id)
        elif ev.kind == "TOKEN_VALID":
            valid_cb.setdefault(key, set()).add(ev.get("cb", ""))
        elif ev.kind == "GATE_OPEN":
            if ev.get("cb") not in valid_cb.get(key, ()):
                violations.append(f"(b) seq={ev.seq} GATE_OPEN without matching TOKEN_VALID")
            opened.add(key)
        elif ev.kind in DELIVERY_KINDS:
            if key not in opened:
                violations.append(f"(a) seq={ev.seq} {ev.kind} before GATE_OPEN")
            if ev.flow_id not in intercepted:
                violations.append(f"(c) seq={ev.seq} bytes on a flow that was never intercepted")
        elif ev.kind == "TOKEN_MINTED" and check_scope:
            scope = Scope.parse(ev.get("scope", ""))
            maximum = Scope.parse(ev.get("max", ""))
            if not scope_subset(scope, maximum):
                violations.append(f"(d) seq={ev.seq} token scope {scope} exceeds {maximum}")
    return violations


# -- adversarial guards -------------------------------------------------------

class RelayGuard(Guard):
    """Insider guard that splices a diverted client's channels onto its own legs to the target."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.targets: dict[str, str] = {}  # diverted client -> real destination
        self.relayed: dict[bytes, str] = {}  # flow_id -> client
        self.taps: dict[int, Tap] = {}
        self.bridges = []

    def handle_frame(self, frame, now, peer):
        fields = tlv_map(frame.payload)
        fid = fields.get(Field.FLOW_ID)
        if peer in self.targets:
            dst = self.targets[peer]
            if fid is not None:
                self.relayed[fid] = peer
            self._ensure_control(dst)
            return [Send(dst, frame)]
        if fid in self.relayed:
            return [Send(self.relayed[fid], frame)]
        return super().handle_frame(frame, now, peer)

    def _on_data(self, handle, data):
        client = handle.peer.host_id
        if client not in self.targets or id(handle) in self._data_flow:
            return super()._on_data(handle, data)
        fields = tlv_map(frame_decode(data).payload)
        fid = fields[Field.FLOW_ID]
        self._data_flow[id(handle)] = fid
        leg2 = self._open_data(self.targets[client], fid)
        self.bridges.append(bridge(handle.transport, leg2.transport))
        # splice the client's own first record onto the second leg as well
        captured = [f for s, f in self.taps[id(handle.transport)].frames if s is Side.INITIATOR]
        Tap(leg2.transport).inject_raw(Side.INITIATOR, captured[-1])


class ReplayGuard(Guard):
    """Insider guard replaying leaked control-frame plaintext from a victim flow."""

    def __init__(self, *args, capture=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.capture: list[tuple[str, str, ControlFrame]] = capture if capture is not None else []
        self.mode: str | None = None
        self.victim: bytes | None = None
        self.taps: dict[str, Tap] = {}

    def _leaked(self, ftype: FrameType, receiver: str | None = None,
                with_field: Field | None = None) -> dict[int, bytes]:
        if self.victim is None:
            # first observed flow is the one whose plaintext leaked
            inits = [f for _, _, f in self.capture if f.type == FrameType.AUTH_INIT]
            if inits:
                self.victim = tlv_map(inits[0].payload).get(Field.FLOW_ID)
        for host, _, frame in self.capture:
            if frame.type != ftype or (receiver is not None and host != receiver):
                continue
            fields = tlv_map(frame.payload)
            if fields.get(Field.FLOW_ID) == self.victim and (with_field is None or with_field in fields):
                return fields
        raise ScenarioConfigError(f"no leaked {ftype.name} for the victim flow")

    def _victim_hosts(self) -> tuple[str, str]:
        self._leaked(FrameType.AUTH_INIT)
        for host, peer, frame in self.capture:
            if frame.type == FrameType.AUTH_INIT and tlv_map(frame.payload).get(Field.FLOW_ID) == self.victim:
                return peer, host  # (initiator, responder)
        raise ScenarioConfigError("victim flow not observed")

    def _draw_nonce(self, out):
        nonce = super()._draw_nonce(out)
        if self.mode in ("evidence-responder", "evidence-initiator"):
            return self._leaked(FrameType.AUTH_INIT)[Field.NONCE]
        return nonce

    def _evidence_for_verifier(self, out, own, peer):
        ini_host, resp_host = self._victim_hosts()
        if self.mode == "evidence-responder":
            return own, Evidence.decode(self._leaked(FrameType.AUTH_EVIDENCE, ini_host)[Field.EVIDENCE])
        if self.mode == "evidence-initiator":
            return Evidence.decode(self._leaked(FrameType.AUTH_EVIDENCE, resp_host)[Field.EVIDENCE]), peer
        return own, peer

    def _grant_token_bytes(self, out, token):
        if self.mode == "grant":
            return self._leaked(FrameType.AUTH_GRANT, with_field=Field.TOKEN)[Field.TOKEN]
        return token.encode()

    def reinject(self, peer: str) -> None:
        """Re-deliver the last application record sent on the control channel to ``peer``."""
        t = self.taps[peer]
        frames = [f for s, f in t.frames if s is Side.INITIATOR]
        t.inject_raw(Side.INITIATOR, frames[-1])


def _mitm_interceptor(variant: str, rng: random.Random):
    """Active attacker on the wire holding only its own, untrusted, key."""
    sk, pk = keypair_from_seed(rng.randbytes(32))
    seen: dict[str, bytes] = {}

    def swap(frame: bytes, start: int, value: bytes) -> bytes:
        return frame[:start] + value + frame[start + len(value):]

    def fn(sender: Side, frame: bytes):
        if sender is Side.INITIATOR and frame[:1] == b"\x01":
            if variant == "client-keyshare":
                frame = swap(frame, 33, rng.randbytes(32))
            elif variant == "client-identity":
                frame = swap(frame, 65, pk)
            seen["ch"] = frame
        elif sender is Side.RESPONDER and frame[:1] == b"\x02":
            body = frame[:-64]
            if variant == "server-identity":
                body = swap(swap(body, 33, rng.randbytes(32)), 65, pk)
                frame = body + sign(sk, digest(seen.get("ch", b"") + body))
            elif variant == "server-keyshare":
                frame = swap(body, 33, rng.randbytes(32)) + frame[-64:]
        return [frame]

    return fn


MITM_VARIANTS = ("server-identity", "server-keyshare", "client-keyshare", "client-identity")


# -- execution ----------------------------------------------------------------

@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: EventTrace
    audit: AuditLog
    verdict: str
    failures: list[str]
    outcomes: dict[str, str]
    stats: dict[str, int]
    tokens: list[ScopeToken]
    anchors: TrustAnchors

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


class Simulation:
    """Hosts, guards, verifier and adversaries for one scenario run."""

    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.rng = random.Random(f"{scenario.name}:{scenario.seed}")
        self.audit = AuditLog()
        self.trace = EventTrace(self.audit)
        self.fabric = Fabric(Clock(CLOCK_START), self.trace)
        self.capture: list[tuple[str, str, ControlFrame]] = []
        self.outcomes: dict[str, str] = {}
        self.flows: dict[str, tuple[Guard, bytes]] = {}
        self.sent: Counter = Counter()
        self.minted: list[ScopeToken] = []
        self.bypass_attempts = 0
        self.adversarial_flows: set[bytes] = set()
        self.expire_flows: set[bytes] = set()
        self.relayed_flows: set[bytes] = set()
        self._ips: dict[str, str] = {}

        from .verifier import Verifier  # local import keeps module load order simple

        attester_seeds = {h.host_id: self.rng.randbytes(32) for h in scenario.hosts}
        attester_keys = {h: keypair_from_seed(s)[1] for h, s in attester_seeds.items()}
        policy = scenario.policy or default_policy(scenario.hosts)
        self.verifier = Verifier("verifier", self.rng.randbytes(32), policy, attester_keys,
                                 ttl=scenario.token_ttl, skew=scenario.clock_skew,
                                 rng=random.Random(self.rng.getrandbits(64)))
        self.guards: dict[str, Guard] = {}
        for i, h in enumerate(scenario.hosts):
            cls = {"guard": Guard, "relay": RelayGuard, "replay": ReplayGuard}[h.role]
            extra = {"capture": self.capture} if h.role == "replay" else {}
            g = cls(h.host_id, self.rng.randbytes(32), attester_seeds[h.host_id], self.fabric,
                    self.verifier, rng_seed=self.rng.getrandbits(64), **extra)
            for j, s in enumerate(h.sandboxes):
                ip = host_ip(i, j)
                ident = g.mediator.register_sandbox(manifest_for(h.host_id, s), ip=ip)
                self.fabric.assign_ip(ip, h.host_id)
                self._ips[ident.ref] = ip
            self.guards[h.host_id] = g
        self.fabric.diversions.update(scenario.diversions)
        for (client, target), relay in scenario.diversions.items():
            if isinstance(self.guards.get(relay), RelayGuard):
                self.guards[relay].targets[client] = target
        self.fabric.finalize()
        self.fabric.transport_hooks.append(self._on_new_transport)
        self.fabric.frame_hooks.append(self._on_frame)
        if scenario.adversary is Adversary.MITM:
            self._mitm_rng = random.Random(self.rng.getrandbits(64))

    @property
    def clock(self) -> Clock:
        return self.fabric.clock

    def _on_new_transport(self, t: Transport, src: str, intended: str, dst: str, purpose: str) -> None:
        g_src, g_dst = self.guards[src], self.guards[dst]
        if isinstance(g_dst, RelayGuard) and purpose == "data":
            g_dst.taps[id(t)] = Tap(t)
        if isinstance(g_src, ReplayGuard) and purpose == "control":
            g_src.taps[intended] = Tap(t)
        if (self.scenario.adversary is Adversary.MITM and purpose == "control"
                and not isinstance(g_src, (RelayGuard, ReplayGuard))):
            variant = self._mitm_rng.choice(MITM_VARIANTS)
            t.intercept(_mitm_interceptor(variant, random.Random(self._mitm_rng.getrandbits(64))))

    def _on_frame(self, guard: Guard, peer: str, frame: ControlFrame) -> ControlFrame:
        if not isinstance(guard, (RelayGuard, ReplayGuard)):
            self.capture.append((guard.host_id, peer, frame))
        if frame.type == FrameType.AUTH_GRANT and self.expire_flows:
            fields = tlv_map(frame.payload)
            if fields.get(Field.FLOW_ID) in self.expire_flows and Field.TOKEN in fields:
                self.expire_flows.discard(fields[Field.FLOW_ID])
                self.clock.advance(self.scenario.token_ttl + self.scenario.clock_skew + 1)
        return frame

    def _resolve(self, ref: str):
        host, _, _ = ref.partition("/")
        g = self.guards[host]
        for s in g.mediator.sandboxes:
            if s.ref == ref:
                return g, s
        raise ScenarioConfigError(f"unknown sandbox {ref!r}")

    def _dst_ip(self, dst: str) -> str:
        return self._ips.get(dst, dst)

    def step(self, action: ScriptAction) -> None:
        self.clock.advance(1)
        if isinstance(action, Connect):
            self._connect(action)
        elif isinstance(action, SendData):
            guard, fid = self.flows[action.label]
            payload = self.rng.randbytes(action.nbytes)
            self.sent[fid] += guard.send_payload(fid, payload)
        elif isinstance(action, Close):
            guard, fid = self.flows[action.label]
            guard.close_flow(fid)
        elif isinstance(action, DirectEgress):
            guard, sb = self._resolve(action.src)
            try:
                guard.direct_egress(sb, self._dst_ip(action.dst), action.port, bytes(action.nbytes))
                self.outcomes[action.label] = "DELIVERED"
            except BypassBlocked:
                self.outcomes[action.label] = "BLOCKED:BypassBlocked"
            self.bypass_attempts += 1
        elif isinstance(action, Advance):
            self.clock.advance(action.seconds)
        elif isinstance(action, Delegate):
            self._delegate(action)
        elif isinstance(action, Reinject):
            target = self.guards[action.peer]
            before = target.counters["record_auth_failures"]
            self.guards[action.host].reinject(action.peer)
            self.fabric.pump()
            after = target.counters["record_auth_failures"]
            self.outcomes[action.label] = "REJECTED:RecordAuthFailure" if after > before else "ACCEPTED"

    def _connect(self, a: Connect) -> None:
        guard, sb = self._resolve(a.src)
        if isinstance(guard, ReplayGuard):
            guard.mode = a.variant
        if a.variant == "expire":
            # the flow id is drawn inside connect(); arm the hook for whatever it is
            self._arm_expiry(guard)
        try:
            flow = guard.connect(sb, self._dst_ip(a.dst), a.port, a.dns_name)
        except (DefaultDeny, UnknownSandbox) as exc:
            self.outcomes[a.label] = f"DENIED:{exc.reason}"
            return
        finally:
            if isinstance(guard, ReplayGuard):
                guard.mode = None
        if isinstance(guard, (RelayGuard, ReplayGuard)) or a.variant is not None:
            self.adversarial_flows.add(flow.flow_id)
        out = guard.outbound[flow.flow_id]
        if out.data is not None and out.data.peer.host_id != out.peer:
            self.relayed_flows.add(flow.flow_id)
        if out.token is not None:
            self.minted.append(out.token)
        self.flows[a.label] = (guard, flow.flow_id)
        if flow.auth_state is AuthState.AUTHORIZED:
            self.outcomes[a.label] = "AUTHORIZED"
        else:
            self.outcomes[a.label] = f"DENIED:{flow.deny_reason}"

    def _arm_expiry(self, guard: Guard) -> None:
        original = guard._draw_nonce

        def draw(out: OutboundFlow) -> bytes:
            self.expire_flows.add(out.flow_id)
            guard._draw_nonce = original
            return original(out)

        guard._draw_nonce = draw

    def _delegate(self, a: Delegate) -> None:
        guard, fid = self.flows[a.parent]
        parent = guard.outbound[fid].token
        now = self.clock.now()
        if parent is None:
            self.outcomes[a.label] = "REJECTED:NoParentToken"
            return
        try:
            child = self.verifier.delegate(parent, a.scope, audience_for(a.audience_host), now)
        except TokenError as exc:
            self.fabric.emit("TOKEN_REJECTED", fid, host="verifier", reason=exc.reason,
                             token=parent.token_id, scope=a.scope)
            self.outcomes[a.label] = f"REJECTED:{exc.reason}"
            return
        self.minted.append(child)
        self.fabric.emit("TOKEN_MINTED", fid, host="verifier", token=child.token_id,
                         subject=child.subject, scope=child.scope, max=parent.scope,
                         parent=parent.token_id, exp=child.exp)
        self.outcomes[a.label] = "MINTED"

    def run(self) -> ScenarioResult:
        for action in self.scenario.script:
            self.step(action)
        self.fabric.pump()
        failures = self.check()
        return ScenarioResult(self.scenario, self.trace, self.audit,
                              "FAIL" if failures else "PASS", failures, dict(self.outcomes),
                              self.stats(), list(self.minted), self.verifier.anchors)

    # -- verdict --------------------------------------------------------------

    def delivered(self) -> Counter:
        out: Counter = Counter()
        for ev in self.trace:
            if ev.kind in DELIVERY_KINDS:
                out[ev.flow_id] += int(ev.get("bytes", "0"))
        return out

    def stats(self) -> dict[str, int]:
        guards = list(self.guards.values())
        return {
            "events": len(self.trace),
            "audit_records": len(self.audit),
            "establishments": self.fabric.establishments,
            "resumptions": sum(g.cfg.stats.resumptions for g in guards),
            "records_software": sum(g.cfg.stats.records_software for g in guards),
            "records_offload": sum(g.cfg.stats.records_offload for g in guards),
            "bypass_attempts": sum(g.mediator.bypass_attempts for g in guards),
            "bypass_bytes_delivered": sum(g.mediator.bypass_bytes_delivered for g in guards),
            "record_auth_failures": sum(g.counters["record_auth_failures"] for g in guards),
            "gated_bytes_dropped": sum(g.counters["gated_bytes_dropped"] for g in guards),
            "delivered_bytes": sum(self.delivered().values()),
            "sent_bytes": sum(self.sent.values()),
            "tokens_minted": len(self.minted),
            "flows_authorized": sum(1 for v in self.outcomes.values() if v == "AUTHORIZED"),
            "flows_denied": sum(1 for v in self.outcomes.values() if v.startswith("DENIED")),
        }

    def check(self) -> list[str]:
        failures = list(assert_trace_properties(self.trace))
        if not self.audit.verify():
            failures.append("audit chain does not verify")
        records = self.audit.records()
        if len(records) != len(self.trace):
            failures.append(f"audit has {len(records)} records for {len(self.trace)} events")
        for ev, rec in zip(self.trace, records):
            if (ev.seq, ev.kind, ev.flow_id) != (rec.seq, rec.kind, rec.flow_id):
                failures.append(f"audit record {rec.seq} does not mirror event {ev.seq}")
                break
        for label, allowed in sorted(self.scenario.expect.items()):
            got = self.outcomes.get(label, "MISSING")
            if got not in allowed:
                failures.append(f"{label}: got {got}, expected one of {sorted(allowed)}")

        bypass_events = len(self.trace.of_kind("BYPASS_ATTEMPT"))
        if bypass_events != self.bypass_attempts:
            failures.append(f"{bypass_events} BYPASS_ATTEMPT events for {self.bypass_attempts} attempts")
        if any(g.mediator.bypass_bytes_delivered for g in self.guards.values()):
            failures.append("bytes delivered outside the guard path")

        delivered = self.delivered()
        for fid, n in sorted(delivered.items()):
            if fid in self.adversarial_flows or fid in self.relayed_flows:
                failures.append(f"flow {fid.hex()}: {n} bytes reached a sandbox on an adversarial flow")
            elif n != self.sent.get(fid, 0):
                failures.append(f"flow {fid.hex()}: delivered {n} of {self.sent.get(fid, 0)} bytes")
        for fid, n in sorted(self.sent.items()):
            if n and delivered.get(fid, 0) != n:
                failures.append(f"flow {fid.hex()}: sent {n} bytes, delivered {delivered.get(fid, 0)}")

        gated = {ev.flow_id for ev in self.trace.of_kind("GATE_OPEN")}
        for fid in sorted(gated & (self.relayed_flows | self._replayed_flows())):
            failures.append(f"gate opened for adversarial flow {fid.hex()}")
        if self.scenario.adversary is Adversary.MITM:
            mitm = {fid for _, fid in self.flows.values()}
            for ev in self.trace:
                if ev.flow_id in mitm and ev.kind in ("EVIDENCE_SENT", "TOKEN_MINTED", "GATE_OPEN"):
                    failures.append(f"seq={ev.seq}: {ev.kind} issued on an intercepted channel")
        return failures

    def _replayed_flows(self) -> set[bytes]:
        return {fid for g, fid in self.flows.values() if isinstance(g, ReplayGuard)}


def run_scenario(scenario: Scenario) -> ScenarioResult:
    return Simulation(scenario).run()


# -- scenario registry --------------------------------------------------------

def _mesh_hosts(n_hosts: int, n_sandboxes: int, names: list[str] | None = None) -> list[HostSpec]:
    names = names or [f"h{i}" for i in range(n_hosts)]
    hosts = []
    for i, name in enumerate(names):
        sandboxes = []
        for j in range(n_sandboxes):
            rules = (ScopeRule("10.0.*:443", Scope.of("kv:read", "rpc:call")),)
            sandboxes.append(SandboxSpec(f"s{j}", rules))
        hosts.append(HostSpec(name, tuple(sandboxes)))
    return hosts


def _random_pair(rng: random.Random, hosts: list[HostSpec]) -> tuple[str, str]:
    a, b = rng.sample(range(len(hosts)), 2)
    src, dst = hosts[a], hosts[b]
    return (f"{src.host_id}/{rng.choice(src.sandboxes).sandbox_id}",
            f"{dst.host_id}/{rng.choice(dst.sandboxes).sandbox_id}")


def honest(seed: int, hosts: int | None = None) -> Scenario:
    n = hosts or 3
    if n < 2:
        raise ScenarioConfigError("honest scenario needs at least two hosts")
    rng = random.Random(f"honest-script:{seed}")
    specs = _mesh_hosts(n, 2)
    script: list[ScriptAction] = []
    expect = {}
    for k in range(8):
        src, dst = _random_pair(rng, specs)
        label = f"flow{k}"
        script += [Connect(label, src, dst), SendData(label, rng.randint(1, 512))]
        if rng.random() < 0.5:
            script.append(SendData(label, rng.randint(1, 512)))
        script.append(Close(label))
        expect[label] = frozenset({"AUTHORIZED"})
    return Scenario("honest", seed, specs, Adversary.NONE, script, expect=expect)


def bypass(seed: int, hosts: int | None = None, sandboxes: int = 2, flows: int = 50,
           attempts: int = 20) -> Scenario:
    n = hosts or 4
    rng = random.Random(f"bypass-script:{seed}")
    specs = _mesh_hosts(n, sandboxes)
    script: list[ScriptAction] = []
    expect = {}
    pending = [("flow", k) for k in range(flows)] + [("egress", k) for k in range(attempts)]
    rng.shuffle(pending)
    for kind, k in pending:
        src, dst = _random_pair(rng, specs)
        if kind == "flow":
            label = f"flow{k}"
            script += [Connect(label, src, dst), SendData(label, rng.randint(1, 1024)), Close(label)]
            expect[label] = frozenset({"AUTHORIZED"})
        else:
            label = f"egress{k}"
            script.append(DirectEgress(label, src, dst, 443, rng.randint(1, 1024)))
            expect[label] = frozenset({"BLOCKED:BypassBlocked"})
    return Scenario("bypass", seed, specs, Adversary.BYPASS, script, expect=expect)


def relay(seed: int, hosts: int | None = None) -> Scenario:
    rng = random.Random(f"relay-script:{seed}")
    specs = _mesh_hosts(2, 2, ["alpha", "beta"]) + [HostSpec("mallory", (), "relay")]
    script: list[ScriptAction] = []
    expect = {}
    for k in range(rng.randint(1, 3)):
        src = f"alpha/s{rng.randrange(2)}"
        dst = f"beta/s{rng.randrange(2)}"
        label = f"relayed{k}"
        script += [Connect(label, src, dst), SendData(label, rng.randint(1, 256)), Close(label)]
        expect[label] = frozenset({"DENIED:BindingMismatch"})
    return Scenario("relay", seed, specs, Adversary.RELAY, script, expect=expect,
                    diversions={("alpha", "beta"): "mallory"})


REPLAY_MODES = ("grant", "evidence-responder", "evidence-initiator")


def replay(seed: int, hosts: int | None = None) -> Scenario:
    rng = random.Random(f"replay-script:{seed}")
    specs = _mesh_hosts(2, 2, ["alpha", "beta"])
    specs.append(HostSpec("mallory", (SandboxSpec("s0", (ScopeRule("10.0.*:443", Scope.of("kv:read", "rpc:call")),)),),
                          "replay"))
    victim_dst = f"beta/s{rng.randrange(2)}"
    script: list[ScriptAction] = [Connect("victim", f"alpha/s{rng.randrange(2)}", victim_dst),
                                  SendData("victim", rng.randint(1, 256))]
    expect = {"victim": frozenset({"AUTHORIZED"})}
    modes = list(REPLAY_MODES)
    rng.shuffle(modes)
    for mode in modes:
        label = f"replay-{mode}"
        script.append(Connect(label, "mallory/s0", victim_dst, variant=mode))
        expect[label] = frozenset({"DENIED:ReplayDetected", "DENIED:BindingMismatch"})
    script.append(Reinject("replay-record", "mallory", "beta"))
    expect["replay-record"] = frozenset({"REJECTED:RecordAuthFailure"})
    script.append(Close("victim"))
    return Scenario("replay", seed, specs, Adversary.REPLAY, script, expect=expect)


def mitm(seed: int, hosts: int | None = None) -> Scenario:
    rng = random.Random(f"mitm-script:{seed}")
    specs = _mesh_hosts(2, 2, ["alpha", "beta"])
    script: list[ScriptAction] = []
    expect = {}
    for k in range(rng.randint(1, 3)):
        label = f"flow{k}"
        script += [Connect(label, f"alpha/s{rng.randrange(2)}", f"beta/s{rng.randrange(2)}"),
                   SendData(label, rng.randint(1, 256))]
        expect[label] = frozenset({"DENIED:HandshakeAuthFailure"})
    return Scenario("mitm", seed, specs, Adversary.MITM, script, expect=expect)


def scope_escalation(seed: int, hosts: int | None = None) -> Scenario:
    read, write, admin = Scope.of("kv:read"), Scope.of("kv:read", "kv:write"), Scope.of("admin:all")
    src_rules = (ScopeRule(f"{host_ip(1, 0)}:443", read),
                 ScopeRule(f"{host_ip(1, 1)}:443", admin),
                 ScopeRule(f"{host_ip(1, 0)}:8443", write))
    dst_rules = (ScopeRule("10.0.*:443", read),)
    specs = [HostSpec("alpha", (SandboxSpec("s0", src_rules),)),
             HostSpec("beta", (SandboxSpec("s0", dst_rules), SandboxSpec("s1", dst_rules)))]
    base = default_policy(specs)
    grants = dict(base.grantable_scopes)
    grants[manifest_for("alpha", specs[0].sandboxes[0]).measurement] = read
    policy = AppraisalPolicy(base.allowed_measurements, base.max_evidence_age, grants)
    rng = random.Random(f"scope-script:{seed}")
    cases = [
        ([Connect("admin", "alpha/s0", "beta/s1")], {"admin": "DENIED:EmptyGrant"}),
        ([Connect("partial", "alpha/s0", "beta/s0", port=8443)], {"partial": "DENIED:ScopeViolation"}),
    ]
    rng.shuffle(cases)
    script: list[ScriptAction] = [Connect("ok", "alpha/s0", "beta/s0"), SendData("ok", rng.randint(1, 256))]
    expect = {"ok": frozenset({"AUTHORIZED"})}
    for actions, exp in cases:
        script += actions
        expect.update({k: frozenset({v}) for k, v in exp.items()})
    script += [Delegate("widen", "ok", write, "beta"), Delegate("narrow", "ok", read, "beta"),
               Close("ok")]
    expect["widen"] = frozenset({"REJECTED:ScopeViolation"})
    expect["narrow"] = frozenset({"MINTED"})
    return Scenario("scope-escalation", seed, specs, Adversary.SCOPE_ESCALATION, script,
                    policy=policy, expect=expect)


def expired_token(seed: int, hosts: int | None = None) -> Scenario:
    rng = random.Random(f"expiry-script:{seed}")
    specs = _mesh_hosts(2, 2, ["alpha", "beta"])
    ttl = rng.choice((1, 60, 300))
    script: list[ScriptAction] = [
        Connect("fresh", "alpha/s0", "beta/s0"), SendData("fresh", 32), Close("fresh"),
        Connect("stale", "alpha/s1", "beta/s1", variant="expire"), SendData("stale", 32),
    ]
    expect = {"fresh": frozenset({"AUTHORIZED"}), "stale": frozenset({"DENIED:Expired"})}
    return Scenario("expired-token", seed, specs, Adversary.EXPIRED_TOKEN, script, expect=expect,
                    token_ttl=ttl)


SCENARIOS: dict[str, Callable[..., Scenario]] = {
    "honest": honest,
    "relay": relay,
    "replay": replay,
    "mitm": mitm,
    "bypass": bypass,
    "scope-escalation": scope_escalation,
    "expired-token": expired_token,
}


def build_scenario(name: str, seed: int, hosts: int | None = None) -> Scenario:
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ScenarioConfigError(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}") from None
    return builder(seed, hosts)
