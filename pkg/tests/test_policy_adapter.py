import json
import sys
import time
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsupply.agents import (
    DistributorDecision,
    HospitalDecision,
    ManufacturerDecision,
    Observation,
    distributor_decide,
    hospital_decide,
    manufacturer_decide,
)
from medsupply.coordination import BuiltinPolicy
from medsupply.messages import OrderMsg
from medsupply.policy_adapter import (
    Channel,
    ExternalPolicy,
    PolicyRequest,
    SchemaError,
    encode_request,
    encode_response,
    external_decide,
    parse_policy_spec,
    parse_response,
    sanitize_decision,
)
from medsupply.runner import round_log_csv, simulate
from medsupply.scenario import default_config

from oracles import apportion

WIRE = Path(__file__).parent / "data" / "wire"
PY = sys.executable

HOSP = Observation(3, "hospital-0", "hospital", (20, 5), pipeline=(10, 0), buffer=(100, 40), backlog=(0, 2),
                   criticality_weights=(1.0, 0.5), forecast=((12.4, 3.6), (13.0, 4.0)))
ORDERS = [OrderMsg("hospital-0", "distributor-0", (80, 10), (0, 0), (0.5, 0.0)),
          OrderMsg("hospital-1", "distributor-0", (40, 10), (0, 0), (0.0, 0.0))]
DIST = Observation(3, "distributor-0", "distributor", (100, 30))
DEMAND = {0: (500, 50), 1: (500, 50)}
MANU = Observation(3, "manufacturer-0", "manufacturer", (300, 40), severity=(0.02, 0.01), alpha=15.0, epsilon=0.05)

CONTEXT = {
    "hospital": (HOSP, {}),
    "distributor": (DIST, {"orders": ORDERS}),
    "manufacturer": (MANU, {"regional_demand": DEMAND}),
}


def corpus(kind):
    return [
        pytest.param(path.stem, line, id=f"{path.stem}-{i}")
        for path in sorted((WIRE / kind).glob("*.jsonl"))
        for i, line in enumerate(path.read_bytes().split(b"\n")[:-1])
    ]


@pytest.mark.parametrize("role,line", corpus("valid"))
def test_valid_corpus_lines_parse(role, line):
    obs, ctx = CONTEXT[role]
    decision = parse_response(line, obs, **ctx)
    clean, _ = sanitize_decision(decision, obs, **ctx)
    assert type(clean) is type(decision)


@pytest.mark.parametrize("role,line", corpus("invalid"))
def test_invalid_corpus_lines_are_refused(role, line):
    obs, ctx = CONTEXT[role]
    with pytest.raises(SchemaError):
        parse_response(line, obs, **ctx)


def test_request_line_is_stable():
    line = encode_request(HOSP, 5000)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert line == (WIRE / "valid" / "request.line").read_bytes()
    req = PolicyRequest.from_line(line)
    assert (req.day, req.agent_id, req.role, req.observation) == (3, "hospital-0", "hospital", HOSP)


def test_request_round_trip_with_context():
    req = PolicyRequest.from_line(encode_request(DIST, 10, orders=ORDERS))
    assert req.orders == tuple(ORDERS)
    req = PolicyRequest.from_line(encode_request(MANU, 10, regional_demand=DEMAND))
    assert req.regional_demand == DEMAND
    with pytest.raises(SchemaError):
        PolicyRequest.from_line(encode_request(HOSP, 1).replace(b'"protocol_version":1', b'"protocol_version":2'))


def test_builtin_decisions_survive_the_wire():
    for obs, ctx, dec in (
        (HOSP, {}, hospital_decide(HOSP)),
        (DIST, {"orders": ORDERS}, distributor_decide(DIST, ORDERS)),
        (MANU, {"regional_demand": DEMAND}, manufacturer_decide(MANU, DEMAND)),
    ):
        back = parse_response(encode_response(obs.agent_id, obs.day, dec), obs, **ctx)
        assert back == dec
        assert sanitize_decision(back, obs, **ctx) == (dec, [])


def test_sanitize_examples():
    dec, clamps = sanitize_decision(HospitalDecision((-5, 3), (0.5, 1.0), (0, 0)), HOSP)
    assert dec.orders == (0, 3) and clamps == ["order[0] -5 -> 0"]
    over = DistributorDecision({"hospital-0": (80, 10), "hospital-1": (40, 10)})
    dec, clamps = sanitize_decision(over, DIST, orders=ORDERS)
    assert [dec.shipments[h][0] for h in ("hospital-0", "hospital-1")] == apportion([80, 40], 100) == [67, 33]
    assert dec.shipments["hospital-0"][1] + dec.shipments["hospital-1"][1] == 20
    assert clamps
    greedy = ManufacturerDecision({0: (400, 0), 1: (100, 0), 5: (1, 1)})
    dec, clamps = sanitize_decision(greedy, MANU, regional_demand=DEMAND)
    assert sorted(dec.allocations) == [0, 1] and dec.allocations[0][0] + dec.allocations[1][0] == 300
    halted = Observation(3, "manufacturer-0", "manufacturer", (300, 40), severity=(0.02, 0.01),
                         alpha=15.0, epsilon=0.05, disrupted=True)
    dec, _ = sanitize_decision(greedy, halted, regional_demand=DEMAND)
    assert all(v == (0, 0) for v in dec.allocations.values())


qty = st.integers(-10**6, 10**6)


@given(st.lists(st.lists(qty, min_size=2, max_size=2), min_size=2, max_size=2),
       st.tuples(st.integers(0, 500), st.integers(0, 500)))
@settings(max_examples=300, deadline=None)
def test_sanitized_distributor_is_feasible(ships, stock):
    obs = Observation(3, "distributor-0", "distributor", stock)
    dec, _ = sanitize_decision(DistributorDecision({"hospital-0": tuple(ships[0]), "hospital-1": tuple(ships[1])}),
                               obs, orders=ORDERS)
    for k in range(2):
        assert sum(dec.shipments[o.hospital][k] for o in ORDERS) <= stock[k]
        for o in ORDERS:
            assert 0 <= dec.shipments[o.hospital][k] <= o.quantity[k]


@given(st.dictionaries(st.integers(0, 3), st.tuples(qty, qty)), st.tuples(st.integers(0, 500), st.integers(0, 500)),
       st.booleans())
@settings(max_examples=300, deadline=None)
def test_sanitized_manufacturer_is_feasible(alloc, stock, halted):
    obs = Observation(3, "manufacturer-0", "manufacturer", stock, severity=(0.02, 0.01), alpha=15.0,
                      epsilon=0.05, disrupted=halted)
    dec, _ = sanitize_decision(ManufacturerDecision(alloc), obs, regional_demand=DEMAND)
    assert sorted(dec.allocations) == [0, 1]
    for k in range(2):
        col = [dec.allocations[r][k] for r in (0, 1)]
        assert min(col) >= 0 and sum(col) <= (0 if halted else stock[k])


def test_policy_spec_parsing():
    assert parse_policy_spec("builtin") is None
    assert parse_policy_spec("external:python3 -m x") == "python3 -m x"
    for bad in ("external:", "llm", ""):
        with pytest.raises(ValueError):
            parse_policy_spec(bad)


def script(tmp_path, body):
    p = tmp_path / "policy.py"
    p.write_text("import sys, json\n" + body)
    return [PY, str(p)]


def test_negative_quantity_response_falls_back(tmp_path):
    cmd = script(tmp_path, """
for line in sys.stdin:
    r = json.loads(line)
    print(json.dumps({"agent_id": r["agent_id"], "day": r["day"], "decision": {"orders": [-5, 0]}}), flush=True)
""")
    with ExternalPolicy(cmd, 2000) as pol:
        dec = pol.hospital(HOSP)
        events = pol.drain_events()
    assert dec == hospital_decide(HOSP)
    assert [e.kind for e in events] == ["fallback"] and "negative" in events[0].detail


def test_silent_process_times_out(tmp_path):
    cmd = script(tmp_path, "import time\ntime.sleep(30)\n")
    with ExternalPolicy(cmd, 100) as pol:
        t0 = time.monotonic()
        dec = pol.hospital(HOSP)
        assert time.monotonic() - t0 < 2
        assert dec == hospital_decide(HOSP) and pol.fallbacks == 1
        assert pol.drain_events()[0].detail == "timeout"


def test_stale_lines_are_skipped(tmp_path):
    cmd = script(tmp_path, """
for line in sys.stdin:
    r = json.loads(line)
    print(json.dumps({"agent_id": "hospital-9", "day": r["day"], "decision": {"orders": [1, 1]}}), flush=True)
    print(json.dumps({"agent_id": r["agent_id"], "day": r["day"], "decision": {"orders": [7, 7]}}), flush=True)
""")
    with ExternalPolicy(cmd, 2000) as pol:
        assert pol.hospital(HOSP).orders == (7, 7)
        assert [e.kind for e in pol.drain_events()] == ["stale_response"]


def test_external_decide_dispatches(tmp_path):
    with ExternalPolicy([PY, "-m", "medsupply.policies.echo"], 5000) as pol:
        for obs, ctx, want in ((HOSP, {}, hospital_decide(HOSP)),
                               (DIST, {"orders": ORDERS}, distributor_decide(DIST, ORDERS)),
                               (MANU, {"regional_demand": DEMAND}, manufacturer_decide(MANU, DEMAND))):
            req = PolicyRequest.from_line(encode_request(obs, 5000, **ctx))
            assert external_decide(req, pol) == want
        assert pol.fallbacks == 0


def test_channel_reports_eof(tmp_path):
    ch = Channel(script(tmp_path, "sys.exit(0)\n"))
    with pytest.raises(EOFError):
        ch.readline(time.monotonic() + 2)
    ch.close()


def test_echo_policy_reproduces_builtin_run():
    cfg = default_config(days=12, seed=6, disruption_prob=0.2)
    ref = simulate(cfg)
    with ExternalPolicy([PY, "-m", "medsupply.policies.echo"], 5000) as pol:
        ext = simulate(cfg, pol)
    assert round_log_csv(ext.round_log) == round_log_csv(ref.round_log)
    assert ext.head_hash == ref.head_hash
    assert ext.report.fallbacks == 0 and ext.report.clamps == 0


def test_killed_adapter_run_completes_via_fallbacks():
    cfg = default_config(days=10, seed=2)
    with ExternalPolicy([PY, "-m", "medsupply.policies.fuzz", "--seed", "3", "--die-after", "5"], 500) as pol:
        res = simulate(cfg, pol)
    assert res.report.fallbacks > 0
    assert len([r for r in res.ledger.chain if r.action == "snapshot_commit"]) == 10
    assert any(e.kind == "fallback" and e.detail.startswith("eof") for e in res.events)
