import random

import pytest

from grimlock import a2a
from grimlock.attestation import ACCEPTED, AppraisalResult
from grimlock.core import Scope, digest, scope_canonical_bytes
from grimlock.errors import DefaultDeny, ProtocolError
from grimlock.frames import (
    ChannelBinding,
    ControlFrame,
    Field,
    FrameType,
    encode_destination,
    make_frame,
    tlv_map,
)
from grimlock.mediation import AuthState
from grimlock.tokens import mint
from support import READ, TwoHosts

HONEST_ORDER = ["SANDBOX_CONNECT", "HANDSHAKE_DONE", "CB_COMPUTED", "CB_COMPUTED",
                "EVIDENCE_SENT", "EVIDENCE_SENT", "EVIDENCE_VERIFIED", "TOKEN_MINTED",
                "TOKEN_VALID", "GATE_OPEN"]


def test_honest_flow_event_order():
    h = TwoHosts()
    flow = h.connect()
    assert flow.auth_state is AuthState.AUTHORIZED
    assert h.kinds(flow.flow_id) == HONEST_ORDER


def test_payload_delivered_only_after_gate():
    h = TwoHosts()
    flow = h.connect()
    assert h.alpha.send_payload(flow.flow_id, b"hello") == 5
    assert h.beta.inboxes[h.dst] == [b"hello"]
    kinds = h.kinds(flow.flow_id)
    assert kinds.index("GATE_OPEN") < kinds.index("FIRST_PLAINTEXT")
    h.alpha.send_payload(flow.flow_id, b"again")
    assert h.kinds(flow.flow_id)[-1] == "PLAINTEXT"


def test_audit_mirrors_trace():
    h = TwoHosts()
    h.connect()
    assert len(h.audit) == len(h.trace) and h.audit.verify()
    assert [r.kind for r in h.audit.records()] == h.kinds()


def test_measurement_rejected_denies_flow():
    h = TwoHosts(allow_dst=False)
    flow = h.connect()
    assert flow.auth_state is AuthState.DENIED
    assert flow.deny_reason == "MeasurementRejected"
    assert "GATE_OPEN" not in h.kinds()
    assert h.alpha.send_payload(flow.flow_id, b"x") == 0
    assert h.beta.inboxes[h.dst] == []


def test_scope_outside_policy_is_empty_grant():
    h = TwoHosts(grant=Scope.of("kv:put"))
    flow = h.connect()
    assert flow.deny_reason == "EmptyGrant"


def test_default_deny_emits_and_raises():
    h = TwoHosts()
    with pytest.raises(DefaultDeny):
        h.alpha.connect(h.src, "10.0.9.9", 443)
    assert h.kinds()[-2:] == ["SANDBOX_CONNECT", "FLOW_DENIED"]


def test_amortization_one_mutual_auth():
    h = TwoHosts()
    flows = [h.connect() for _ in range(10)]
    assert all(f.auth_state is AuthState.AUTHORIZED for f in flows)
    assert h.alpha.cfg.stats.mutual_auth == 1
    assert h.alpha.cfg.stats.resumptions >= 10
    controls = [e.get("control") for e in h.trace.of_kind("HANDSHAKE_DONE")]
    assert controls[0] == "new" and set(controls[1:]) == {"reused"}


def test_close_flow_closes_gate():
    h = TwoHosts()
    flow = h.connect()
    h.alpha.close_flow(flow.flow_id)
    assert flow.auth_state is AuthState.CLOSED
    assert h.beta.gates[flow.flow_id] == a2a.GATE_CLOSED
    assert h.kinds(flow.flow_id)[-1] == "FLOW_CLOSED"


def test_direct_egress_blocked():
    h = TwoHosts()
    with pytest.raises(Exception):
        h.alpha.direct_egress(h.src, "10.0.1.1", 443, b"leak")
    assert h.kinds() == ["BYPASS_ATTEMPT"]
    assert h.beta.inboxes[h.dst] == []


# -- handle_frame as a pure step ---------------------------------------------

FID = bytes(range(16))
NONCE = bytes(32)


def _pending_inbound(h):
    init = make_frame(FrameType.AUTH_INIT, [
        (Field.FLOW_ID, FID), (Field.NONCE, NONCE), (Field.AUDIENCE, b"beta/guard"),
        (Field.SCOPE, scope_canonical_bytes(READ)),
        (Field.DESTINATION, encode_destination("10.0.1.1", 443))])
    assert h.beta.handle_frame(init, h.fabric.clock.now(), "alpha") == []
    inb = h.beta.inbound[FID]
    cb = b"\x11" * 32
    inb.binding = ChannelBinding(inb.ctx, cb, digest(cb))
    return inb


def _grant(h, cb_hash):
    res = AppraisalResult(ACCEPTED, digest(b"m"), cb_hash, 0, READ)
    tok = mint(h.verifier._issuer_key, "verifier", res, "alpha/s0", "beta/guard", READ, cb_hash,
               60, h.fabric.clock.now(), random.Random(0))
    return make_frame(FrameType.AUTH_GRANT, [(Field.FLOW_ID, FID), (Field.TOKEN, tok.encode())])


def test_handle_frame_valid_grant_opens_gate():
    h = TwoHosts()
    inb = _pending_inbound(h)
    actions = h.beta.handle_frame(_grant(h, inb.binding.cb_hash), h.fabric.clock.now(), "alpha")
    kinds = [type(a).__name__ for a in actions]
    assert kinds == ["Emit", "GateOpen", "Send"]
    assert actions[0].kind == "TOKEN_VALID"
    assert Field.TOKEN not in tlv_map(actions[2].frame.payload)


def test_handle_frame_wrong_binding_rejected():
    h = TwoHosts()
    _pending_inbound(h)
    actions = h.beta.handle_frame(_grant(h, digest(b"elsewhere")), h.fabric.clock.now(), "alpha")
    assert not any(isinstance(a, a2a.GateOpen) for a in actions)
    assert actions[0].kind == "TOKEN_REJECTED"
    assert dict(actions[0].fields)["reason"] == "BindingMismatch"
    assert actions[1].frame.type == FrameType.AUTH_DENY


def test_handle_frame_is_deterministic():
    runs = []
    for _ in range(2):
        h = TwoHosts()
        inb = _pending_inbound(h)
        runs.append(h.beta.handle_frame(_grant(h, inb.binding.cb_hash), 5, "alpha"))
    assert runs[0] == runs[1]


def test_handle_frame_wrong_peer_is_unknown_flow():
    h = TwoHosts()
    inb = _pending_inbound(h)
    with pytest.raises(ProtocolError):
        h.beta.handle_frame(_grant(h, inb.binding.cb_hash), 0, "mallory")


@pytest.mark.parametrize("frame", [
    ControlFrame(0x7F, b""),
    make_frame(FrameType.AUTH_GRANT, [(Field.FLOW_ID, b"\x00" * 16)]),
    make_frame(FrameType.AUTH_EVIDENCE, [(Field.FLOW_ID, b"short")]),
    make_frame(FrameType.FLOW_CLOSE, []),
])
def test_handle_frame_protocol_errors(frame):
    h = TwoHosts()
    with pytest.raises(ProtocolError):
        h.beta.handle_frame(frame, 0, "alpha")


def test_duplicate_auth_init():
    h = TwoHosts()
    _pending_inbound(h)
    with pytest.raises(ProtocolError):
        _pending_inbound(h)


def test_wrong_audience_denied_at_responder():
    h = TwoHosts()
    init = make_frame(FrameType.AUTH_INIT, [
        (Field.FLOW_ID, FID), (Field.NONCE, NONCE), (Field.AUDIENCE, b"gamma/guard"),
        (Field.SCOPE, scope_canonical_bytes(READ)),
        (Field.DESTINATION, encode_destination("10.0.1.1", 443))])
    actions = h.beta.handle_frame(init, 0, "alpha")
    assert actions[0].kind == "FLOW_DENIED" and FID not in h.beta.inbound


def test_gate_opens_at_most_once():
    h = TwoHosts()
    inb = _pending_inbound(h)
    op = a2a.GateOpen(FID, inb.binding.cb_hash, b"t" * 16)
    assert h.beta._open_gate(op) is True
    assert h.beta._open_gate(op) is False
    assert len(h.trace.of_kind("GATE_OPEN")) == 1

