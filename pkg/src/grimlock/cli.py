"""``guardctl``: run scenarios and inspect the artifacts they leave behind.

Exit codes: 0 success/PASS, 1 FAIL or failed validation, 2 usage, I/O or
malformed input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audit import parse_audit_bytes, verify_audit_bytes
from .core import verify
from .errors import MalformedToken, ScenarioConfigError, UnsupportedVersion
from .harness import SCENARIOS, build_scenario, run_scenario
from .tokens import ScopeToken, TrustAnchors
from .tokens import decode as decode_token
from .trace import EventTrace

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(args, payload: dict, text_lines: list[str]) -> None:
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


# -- anchors file -------------------------------------------------------------

def dump_anchors(anchors: TrustAnchors) -> str:
    lines = [f"issuer {i} {k.hex()}" for i, k in sorted(anchors.issuer_keys.items())]
    lines.append(f"skew {anchors.clock_skew}")
    return "\n".join(lines) + "\n"


def parse_anchors(text: str) -> TrustAnchors:
    keys, skew = {}, 30
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "issuer" and len(parts) == 3:
                key = bytes.fromhex(parts[2])
                if len(key) != 32:
                    raise ValueError("key must be 32 bytes")
                keys[parts[1]] = key
            elif parts[0] == "skew" and len(parts) == 2:
                skew = int(parts[1])
            else:
                raise ValueError("unrecognized line")
        except ValueError as exc:
            raise UsageError(f"anchors line {lineno}: {exc}") from None
    if not keys:
        raise UsageError("anchors file names no issuer")
    return TrustAnchors(keys, skew)


# -- subcommands --------------------------------------------------------------

def cmd_run_scenario(args) -> int:
    try:
        scenario = build_scenario(args.name, args.seed, args.hosts)
        result = run_scenario(scenario)
    except ScenarioConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else Path("out") / f"{args.name}-seed{args.seed}"
    try:
        (out / "tokens").mkdir(parents=True, exist_ok=True)
        (out / "trace.txt").write_text(result.trace.serialize())
        (out / "audit.log").write_bytes(result.audit.to_bytes())
        (out / "anchors.txt").write_text(dump_anchors(result.anchors))
        for i, tok in enumerate(result.tokens):
            (out / "tokens" / f"{i:03d}-{tok.token_id.hex()}.tok").write_bytes(tok.encode())
        summary = {
            "scenario": args.name, "seed": args.seed, "verdict": result.verdict,
            "failures": result.failures, "outcomes": result.outcomes, "stats": result.stats,
            "out": str(out),
        }
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror or exc}") from None
    lines = [f"scenario={args.name} seed={args.seed} verdict={result.verdict} out={out}"]
    lines += [f"outcome {k}={v}" for k, v in sorted(result.outcomes.items())]
    lines += [f"failure {f}" for f in result.failures]
    _emit(args, summary, lines)
    return EXIT_OK if result.passed else EXIT_FAIL


def _token_fields(tok: ScopeToken) -> dict:
    return {
        "version": tok.version, "token_id": tok.token_id.hex(), "issuer": tok.issuer_id,
        "subject": tok.subject, "audience": tok.audience, "scope": str(tok.scope),
        "cb_hash": tok.cb_hash.hex(), "iat": tok.iat, "exp": tok.exp,
        "parent": tok.parent_token_id.hex() if tok.parent_token_id else None,
        "signature": tok.signature.hex(),
    }


def cmd_token_inspect(args) -> int:
    data = _read(args.file)
    anchors = parse_anchors(_read(args.anchors).decode("utf-8", "replace"))
    try:
        tok = decode_token(data)
    except (MalformedToken, UnsupportedVersion) as exc:
        raise UsageError(f"{exc.reason}: {exc}") from None
    key = anchors.issuer_keys.get(tok.issuer_id)
    valid = key is not None and verify(key, tok.signed_bytes(), tok.signature)
    fields = _token_fields(tok)
    fields["signature_valid"] = valid
    _emit(args, fields, [f"{k}={'-' if v is None else v}" for k, v in fields.items()])
    return EXIT_OK if valid else EXIT_FAIL


def cmd_audit_verify(args) -> int:
    data = _read(args.file)
    broken = verify_audit_bytes(data)
    log, _ = parse_audit_bytes(data)
    payload = {"records": len(log), "intact": broken is None, "first_broken": broken}
    if broken is None:
        text = [f"intact records={len(log)}"]
    else:
        text = [f"broken first_broken={broken} records={len(log)}"]
    _emit(args, payload, text)
    return EXIT_OK if broken is None else EXIT_FAIL


def flow_summaries(trace: EventTrace) -> list[dict]:
    flows: dict[str, dict] = {}
    for ev in trace:
        if ev.flow == "00" * 16:
            continue
        f = flows.setdefault(ev.flow, {"flow": ev.flow, "src": None, "dst": None, "peer": None,
                                       "state": "PENDING_AUTH", "reason": None, "token": None,
                                       "scope": None, "bytes": 0, "first_seq": ev.seq})
        if ev.kind == "SANDBOX_CONNECT":
            f["src"], f["dst"] = ev.get("src"), ev.get("dst")
            f["scope"] = ev.get("scope")
        elif ev.kind == "HANDSHAKE_DONE":
            f["peer"] = ev.get("peer")
        elif ev.kind == "GATE_OPEN":
            f["state"], f["token"] = "AUTHORIZED", ev.get("token")
        elif ev.kind == "FLOW_DENIED" and f["state"] != "CLOSED":
            f["state"], f["reason"] = "DENIED", ev.get("reason")
        elif ev.kind == "TOKEN_REJECTED" and ev.get("host") != "verifier":
            f["state"], f["reason"] = "DENIED", ev.get("reason")
        elif ev.kind == "FLOW_CLOSED":
            f["state"] = "CLOSED" if f["state"] == "AUTHORIZED" else f["state"]
        elif ev.kind in ("FIRST_PLAINTEXT", "PLAINTEXT"):
            f["bytes"] += int(ev.get("bytes", "0"))
    return sorted(flows.values(), key=lambda f: f["first_seq"])


def cmd_flows_dump(args) -> int:
    raw = _read(args.file)
    try:
        trace = EventTrace.parse(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise UsageError(f"malformed trace: {exc}") from None
    flows = flow_summaries(trace)
    lines = [" ".join(f"{k}={'-' if v is None else v}" for k, v in f.items() if k != "first_seq")
             for f in flows]
    _emit(args, {"flows": [{k: v for k, v in f.items() if k != "first_seq"} for f in flows]},
          lines)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Parser(add_help=False)
    fmt.add_argument("--format", choices=("text", "json"), default="text")

    p = _Parser(prog="guardctl", description=__doc__.splitlines()[0].replace("``", ""))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    rs = sub.add_parser("run-scenario", parents=[fmt], help="run a registered scenario")
    rs.add_argument("name", help=f"one of: {', '.join(SCENARIOS)}")
    rs.add_argument("--seed", type=int, default=1)
    rs.add_argument("--out", default=None, help="output directory (default out/<name>-seed<seed>)")
    rs.add_argument("--hosts", type=int, default=None)
    rs.set_defaults(func=cmd_run_scenario)

    tok = sub.add_parser("token", help="token utilities")
    tsub = tok.add_subparsers(dest="token_command", required=True, parser_class=_Parser)
    ti = tsub.add_parser("inspect", parents=[fmt], help="decode a token and check its signature")
    ti.add_argument("file")
    ti.add_argument("--anchors", required=True, help="trust anchors file")
    ti.set_defaults(func=cmd_token_inspect)

    au = sub.add_parser("audit", help="audit log utilities")
    asub = au.add_subparsers(dest="audit_command", required=True, parser_class=_Parser)
    av = asub.add_parser("verify", parents=[fmt], help="recompute every chain link")
    av.add_argument("file")
    av.set_defaults(func=cmd_audit_verify)

    fl = sub.add_parser("flows", help="flow table views")
    fsub = fl.add_subparsers(dest="flows_command", required=True, parser_class=_Parser)
    fd = fsub.add_parser("dump", parents=[fmt], help="per-flow summary of a trace file")
    fd.add_argument("file")
    fd.set_defaults(func=cmd_flows_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"guardctl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
