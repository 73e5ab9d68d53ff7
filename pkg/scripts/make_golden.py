"""Regenerate tests/golden/vectors.json from the independent layout oracle.

Run once; the output is committed and compared byte-for-byte by the tests.
"""

import hashlib
import json
import sys
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracles as o  # noqa: E402


def h(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


def main() -> None:
    issuer = Ed25519PrivateKey.from_private_bytes(h("golden issuer"))
    attester = Ed25519PrivateKey.from_private_bytes(h("golden attester"))
    guard_pub = Ed25519PrivateKey.from_private_bytes(h("golden guard")).public_key().public_bytes_raw()

    nonce0 = bytes(32)
    ctx = o.context_bytes(nonce0, "hostB/guard", ["send:mail"])
    flow_id = h("golden flow")[:16]
    cb_hash = h("golden cb")
    measurement = h("golden measurement")

    root_signed = o.token_signed(h("tok1")[:16], "verifier", "hostA/s0", "hostB/guard",
                                 ["send:mail", "read:mail"], cb_hash, None, 1_760_000_000,
                                 1_760_000_060)
    child_signed = o.token_signed(h("tok2")[:16], "verifier", "hostA/s0", "hostC/guard",
                                  ["send:mail"], cb_hash, h("tok1")[:16], 1_760_000_010,
                                  1_760_000_060)
    ev_signed = o.evidence_signed("hostB", measurement, nonce0, cb_hash,
                                  [("role", "responder"), ("subject", "hostB/s0")])
    records = [
        o.audit_record(0, 1_760_000_000, flow_id, "SANDBOX_CONNECT", "info"),
        o.audit_record(1, 1_760_000_001, flow_id, "TOKEN_MINTED", "allow", h("tok1")[:16]),
        o.audit_record(2, 1_760_000_002, flow_id, "FLOW_DENIED", "deny", None, "BindingMismatch"),
    ]
    secret = h("golden exporter secret")

    vectors = {
        "scope_single": o.scope_bytes(["a:y"]),
        "scope_pair": o.scope_bytes(["b:x", "a:y"]),
        "scope_empty": o.scope_bytes([]),
        "context_sample": ctx,
        "frame_hello": o.frame(0x01, o.tlv([(1, flow_id), (8, o.lp("hostA") + guard_pub)])),
        "frame_auth_init": o.frame(0x02, o.tlv([(1, flow_id), (2, nonce0), (3, b"hostB/guard"),
                                                (4, o.scope_bytes(["send:mail"])),
                                                (9, bytes([10, 0, 1, 1]) + (443).to_bytes(2, "big"))])),
        "frame_auth_deny": o.frame(0x05, o.tlv([(1, flow_id), (7, (5).to_bytes(2, "big"))])),
        "frame_flow_close": o.frame(0x06, o.tlv([(1, flow_id)])),
        "token_root": root_signed + issuer.sign(root_signed),
        "token_child": child_signed + issuer.sign(child_signed),
        "evidence": ev_signed + attester.sign(ev_signed),
        "audit_record_0": records[0],
        "audit_record_1": records[1],
        "audit_record_2": records[2],
        "audit_chain_head": o.audit_chain(records)[-1],
        "exporter_cb": o.exporter(secret, b"EXPORTER-grimlock-a2a-v1", ctx, 32),
        "exporter_long": o.exporter(secret, b"EXPORTER-test", b"", 100),
    }
    out = {
        "inputs": {
            "issuer_seed": h("golden issuer").hex(),
            "attester_seed": h("golden attester").hex(),
            "guard_seed": h("golden guard").hex(),
            "flow_id": flow_id.hex(),
            "cb_hash": cb_hash.hex(),
            "measurement": measurement.hex(),
            "tok1": h("tok1")[:16].hex(),
            "tok2": h("tok2")[:16].hex(),
            "exporter_secret": secret.hex(),
        },
        "vectors": {k: v.hex() for k, v in vectors.items()},
    }
    path = ROOT / "tests" / "golden" / "vectors.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(vectors)} vectors to {path}")


if __name__ == "__main__":
    main()
