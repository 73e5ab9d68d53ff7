"""Implementation output versus vectors produced by the independent oracle."""

import dataclasses
import json
from pathlib import Path

import pytest

from grimlock import channel as ch
from grimlock.attestation import Evidence, attest
from grimlock.audit import AuditLog, AuditRecord
from grimlock.core import Digest, HostIdentity, Scope, keypair_from_seed, scope_canonical_bytes
from grimlock.errors import reason_code
from grimlock.frames import (
    BindingContext,
    Field,
    FrameType,
    encode_context,
    encode_destination,
    frame_decode,
    frame_encode,
    make_frame,
)
from grimlock.tokens import ScopeToken, decode
from grimlock.tokens import _signed as sign_token
from support import channel

DATA = json.loads((Path(__file__).parent / "golden" / "vectors.json").read_text())
INPUTS = {k: bytes.fromhex(v) for k, v in DATA["inputs"].items()}
V = {k: bytes.fromhex(v) for k, v in DATA["vectors"].items()}
FLOW = INPUTS["flow_id"]
CB = Digest(INPUTS["cb_hash"])
T0 = 1_760_000_000


def test_vector_set_complete():
    assert len(V) == 17


@pytest.mark.parametrize("name, entries", [
    ("scope_single", ["a:y"]), ("scope_pair", ["b:x", "a:y"]), ("scope_empty", []),
])
def test_scope_vectors(name, entries):
    assert scope_canonical_bytes(Scope(entries)) == V[name]


def test_context_vector():
    ctx = BindingContext(bytes(32), "hostB/guard", Scope.of("send:mail"))
    assert encode_context(ctx) == V["context_sample"]


def test_frame_vectors():
    _, pk = keypair_from_seed(INPUTS["guard_seed"])
    frames = {
        "frame_hello": make_frame(FrameType.HELLO, [
            (Field.FLOW_ID, FLOW), (Field.HOST_IDENTITY, HostIdentity("hostA", pk).encode())]),
        "frame_auth_init": make_frame(FrameType.AUTH_INIT, [
            (Field.FLOW_ID, FLOW), (Field.NONCE, bytes(32)), (Field.AUDIENCE, b"hostB/guard"),
            (Field.SCOPE, scope_canonical_bytes(Scope.of("send:mail"))),
            (Field.DESTINATION, encode_destination("10.0.1.1", 443))]),
        "frame_auth_deny": make_frame(FrameType.AUTH_DENY, [
            (Field.FLOW_ID, FLOW),
            (Field.DENY_REASON, reason_code("BindingMismatch").to_bytes(2, "big"))]),
        "frame_flow_close": make_frame(FrameType.FLOW_CLOSE, [(Field.FLOW_ID, FLOW)]),
    }
    for name, frame in frames.items():
        assert frame_encode(frame) == V[name], name
        assert frame_decode(V[name]) == frame


def _tokens():
    sk, _ = keypair_from_seed(INPUTS["issuer_seed"])
    root = ScopeToken(INPUTS["tok1"], "verifier", "hostA/s0", "hostB/guard",
                      Scope.of("send:mail", "read:mail"), CB, T0, T0 + 60)
    child = ScopeToken(INPUTS["tok2"], "verifier", "hostA/s0", "hostC/guard",
                       Scope.of("send:mail"), CB, T0 + 10, T0 + 60, INPUTS["tok1"])
    return sign_token(root, sk), sign_token(child, sk)


def test_token_vectors():
    root, child = _tokens()
    assert root.encode() == V["token_root"]
    assert child.encode() == V["token_child"]
    assert decode(V["token_root"]) == root
    assert decode(V["token_child"]).parent_token_id == INPUTS["tok1"]


def test_evidence_vector():
    sk, _ = keypair_from_seed(INPUTS["attester_seed"])
    ev = attest(sk, "hostB", Digest(INPUTS["measurement"]), CB, bytes(32),
                (("role", "responder"), ("subject", "hostB/s0")))
    assert ev.encode() == V["evidence"]
    assert Evidence.decode(V["evidence"]) == ev


def test_audit_vectors():
    log = AuditLog()
    records = [
        AuditRecord(0, T0, FLOW, "SANDBOX_CONNECT", "info"),
        AuditRecord(1, T0 + 1, FLOW, "TOKEN_MINTED", "allow", INPUTS["tok1"]),
        AuditRecord(2, T0 + 2, FLOW, "FLOW_DENIED", "deny", None, "BindingMismatch"),
    ]
    for i, rec in enumerate(records):
        assert rec.canonical_bytes() == V[f"audit_record_{i}"]
        assert AuditRecord.decode(V[f"audit_record_{i}"]) == rec
        log.append(rec)
    assert bytes(log.head) == V["audit_chain_head"]


def test_exporter_vectors():
    _, _, _, hi, _ = channel()
    h = dataclasses.replace(hi, _exporter_secret=INPUTS["exporter_secret"])
    assert ch.exporter(h, b"EXPORTER-grimlock-a2a-v1", V["context_sample"], 32) == V["exporter_cb"]
    assert ch.exporter(h, b"EXPORTER-test", b"", 100) == V["exporter_long"]
