"""Small builders shared by the test modules."""

import hashlib
import random

from grimlock.a2a import Clock, Fabric, Guard
from grimlock.attestation import AppraisalPolicy
from grimlock.audit import AuditLog
from grimlock.channel import ChannelConfig, Transport, establish
from grimlock.core import HostIdentity, Scope, keypair_from_seed
from grimlock.mediation import SandboxManifest, ScopeRule
from grimlock.trace import EventTrace
from grimlock.verifier import Verifier


def seed(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


def host_cfg(host_id: str, anchors=(), rng_seed: int = 0, key_label: str | None = None) -> ChannelConfig:
    sk, pk = keypair_from_seed(seed(key_label or f"guard:{host_id}"))
    return ChannelConfig(HostIdentity(host_id, pk), sk, frozenset(anchors) | {pk}, rng_seed)


def cfg_pair(a="hostA", b="hostB", seed_a=1, seed_b=2):
    ca, cb = host_cfg(a, rng_seed=seed_a), host_cfg(b, rng_seed=seed_b)
    anchors = {ca.local_identity.guard_pubkey, cb.local_identity.guard_pubkey}
    ca.trust_anchors = frozenset(anchors)
    cb.trust_anchors = frozenset(anchors)
    return ca, cb


def channel(seed_a=1, seed_b=2):
    ca, cb = cfg_pair(seed_a=seed_a, seed_b=seed_b)
    t = Transport("test")
    hi, hr = establish(ca, cb, t)
    return ca, cb, t, hi, hr


READ = Scope.of("kv:read")


class TwoHosts:
    """alpha/s0 -> beta/s0 wired through real guards and a verifier."""

    def __init__(self, src_scope=READ, grant=READ, allow_dst=True, ttl=60, skew=30):
        self.audit = AuditLog()
        self.fabric = Fabric(Clock(1_760_000_000), EventTrace(self.audit))
        self.src_manifest = SandboxManifest("alpha", "s0", (ScopeRule("10.0.1.*:443", src_scope),))
        self.dst_manifest = SandboxManifest("beta", "s0", (ScopeRule("10.0.0.*:443", READ),))
        allowed = {self.src_manifest.measurement}
        if allow_dst:
            allowed.add(self.dst_manifest.measurement)
        policy = AppraisalPolicy(frozenset(allowed), 120,
                                 {self.src_manifest.measurement: grant,
                                  self.dst_manifest.measurement: READ})
        attesters = {h: keypair_from_seed(seed(f"att:{h}"))[1] for h in ("alpha", "beta")}
        self.verifier = Verifier("verifier", seed("issuer"), policy, attesters, ttl=ttl, skew=skew,
                                 rng=random.Random(99))
        self.alpha = Guard("alpha", seed("sig:alpha"), seed("att:alpha"), self.fabric, self.verifier, 1)
        self.beta = Guard("beta", seed("sig:beta"), seed("att:beta"), self.fabric, self.verifier, 2)
        self.src = self.alpha.mediator.register_sandbox(self.src_manifest, ip="10.0.0.1")
        self.dst = self.beta.mediator.register_sandbox(self.dst_manifest, ip="10.0.1.1")
        self.fabric.assign_ip("10.0.0.1", "alpha")
        self.fabric.assign_ip("10.0.1.1", "beta")
        self.fabric.finalize()

    def connect(self):
        return self.alpha.connect(self.src, "10.0.1.1", 443)

    @property
    def trace(self):
        return self.fabric.trace

    def kinds(self, flow_id=None):
        evs = self.trace.for_flow(flow_id) if flow_id else list(self.trace)
        return [e.kind for e in evs]
