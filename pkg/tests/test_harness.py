import pytest

from grimlock.core import Scope
from grimlock.errors import ScenarioConfigError
from grimlock.harness import (
    SCENARIOS,
    Adversary,
    Close,
    Connect,
    HostSpec,
    SandboxSpec,
    Scenario,
    SendData,
    assert_trace_properties,
    build_scenario,
    run_scenario,
)
from grimlock.mediation import ScopeRule
from grimlock.trace import EventTrace

F1 = b"\x01" * 16


@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_every_scenario_passes(name, seed):
    result = run_scenario(build_scenario(name, seed))
    assert result.passed, result.failures


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_deterministic_per_seed(name):
    a = run_scenario(build_scenario(name, 5))
    b = run_scenario(build_scenario(name, 5))
    assert a.trace.serialize() == b.trace.serialize()
    assert a.audit.to_bytes() == b.audit.to_bytes()


def test_seeds_differ():
    a = run_scenario(build_scenario("honest", 1)).trace.serialize()
    b = run_scenario(build_scenario("honest", 2)).trace.serialize()
    assert a != b


def test_trace_roundtrip():
    trace = run_scenario(build_scenario("honest", 1)).trace
    text = trace.serialize()
    assert EventTrace.parse(text).serialize() == text


def _trace(*events):
    t = EventTrace()
    for kind, fields in events:
        t.emit(kind, F1, 0, **fields)
    return t


def test_synthetic_delivery_before_gate():
    t = _trace(("SANDBOX_CONNECT", {"host": "a"}), ("FIRST_PLAINTEXT", {"host": "b", "bytes": 3}))
    v = assert_trace_properties(t)
    assert v and v[0].startswith("(a)")


def test_synthetic_gate_without_token():
    t = _trace(("SANDBOX_CONNECT", {"host": "a"}), ("GATE_OPEN", {"host": "b", "cb": "aa"}))
    assert assert_trace_properties(t)[0].startswith("(b)")


def test_synthetic_gate_with_other_cb():
    t = _trace(("TOKEN_VALID", {"host": "b", "cb": "bb"}), ("GATE_OPEN", {"host": "b", "cb": "aa"}))
    assert assert_trace_properties(t)[0].startswith("(b)")


def test_synthetic_unintercepted_delivery():
    t = _trace(("TOKEN_VALID", {"host": "b", "cb": "aa"}), ("GATE_OPEN", {"host": "b", "cb": "aa"}),
               ("FIRST_PLAINTEXT", {"host": "b", "bytes": 1}))
    assert [v[:3] for v in assert_trace_properties(t)] == ["(c)"]


def test_synthetic_scope_overreach():
    t = _trace(("TOKEN_MINTED", {"host": "a", "scope": Scope.of("a:x", "b:y"), "max": Scope.of("a:x")}))
    assert assert_trace_properties(t)[0].startswith("(d)")
    assert assert_trace_properties(t, check_scope=False) == []


def test_clean_synthetic_trace():
    t = _trace(("SANDBOX_CONNECT", {"host": "a"}), ("TOKEN_VALID", {"host": "b", "cb": "aa"}),
               ("GATE_OPEN", {"host": "b", "cb": "aa"}), ("FIRST_PLAINTEXT", {"host": "b", "bytes": 1}))
    assert assert_trace_properties(t) == []


def test_replay_grant_rejected_at_gate():
    result = run_scenario(build_scenario("replay", 1))
    assert result.outcomes["victim"] == "AUTHORIZED"
    assert result.outcomes["replay-record"] == "REJECTED:RecordAuthFailure"
    reasons = {e.get("reason") for e in result.trace.of_kind("TOKEN_REJECTED")}
    assert "BindingMismatch" in reasons


def test_relay_never_delivers():
    result = run_scenario(build_scenario("relay", 3))
    assert not result.trace.of_kind("GATE_OPEN")
    assert result.stats["record_auth_failures"] >= 1


def test_mitm_no_evidence_issued():
    result = run_scenario(build_scenario("mitm", 4))
    assert not result.trace.of_kind("EVIDENCE_SENT")
    assert set(result.outcomes.values()) == {"DENIED:HandshakeAuthFailure"}


def test_bypass_counts():
    result = run_scenario(build_scenario("bypass", 1))
    s = result.stats
    assert s["bypass_attempts"] == 20 and s["bypass_bytes_delivered"] == 0
    assert s["flows_authorized"] == 50


def test_honest_offloads_after_gate():
    s = run_scenario(build_scenario("honest", 1)).stats
    assert s["records_offload"] > 0 and s["delivered_bytes"] == s["sent_bytes"]


def test_scope_escalation_outcomes():
    r = run_scenario(build_scenario("scope-escalation", 1))
    assert r.outcomes == {"ok": "AUTHORIZED", "admin": "DENIED:EmptyGrant",
                          "partial": "DENIED:ScopeViolation", "widen": "REJECTED:ScopeViolation",
                          "narrow": "MINTED"}


def test_wrong_expectation_fails_verdict():
    sc = build_scenario("honest", 1)
    sc.expect["flow0"] = frozenset({"DENIED:Expired"})
    r = run_scenario(sc)
    assert not r.passed and any("flow0" in f for f in r.failures)


def _host(name, n=1):
    rule = (ScopeRule("10.0.*:443", Scope.of("kv:read")),)
    return HostSpec(name, tuple(SandboxSpec(f"s{i}", rule) for i in range(n)))


@pytest.mark.parametrize("scenario", [
    Scenario("x", 1, [_host("a"), _host("a")]),
    Scenario("x", 1, [_host("a", 17)]),
    Scenario("x", 1, [HostSpec("a", (), "wizard")]),
    Scenario("x", 1, [_host("a")], script=[Connect("f", "a/s9", "a/s0")]),
    Scenario("x", 1, [_host("a")], script=[SendData("nope", 1)]),
    Scenario("x", 1, [_host("a")], script=[Connect("f", "a/s0", "a/s0"), Connect("f", "a/s0", "a/s0")]),
    Scenario("x", 1, [_host("a")], expect={"ghost": frozenset()}),
])
def test_invalid_scenarios(scenario):
    with pytest.raises(ScenarioConfigError):
        run_scenario(scenario)


def test_unknown_scenario_name():
    with pytest.raises(ScenarioConfigError):
        build_scenario("nosuch", 1)


def test_custom_scenario_runs():
    sc = Scenario("custom", 9, [_host("a"), _host("b")], Adversary.NONE,
                  [Connect("f", "a/s0", "b/s0"), SendData("f", 10), Close("f")],
                  expect={"f": frozenset({"AUTHORIZED"})})
    r = run_scenario(sc)
    assert r.passed and r.stats["delivered_bytes"] == 10
