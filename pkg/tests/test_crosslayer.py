import copy
import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsupply.coordination import BuiltinPolicy, Environment, apply_outcome, build_topology, initial_world, run_round
from medsupply.crosslayer import (
    BAD_MAC,
    HASH_MISMATCH,
    MALFORMED,
    MISSING_CONTENT,
    STALE,
    UNAUTHORIZED,
    SnapshotFormatError,
    build_snapshot,
    canonical_serialize,
    disruption_reports,
    parse_snapshot,
    read_receipts_csv,
    receipts_csv,
    sign_payload,
    sign_snapshot,
    submit_snapshot,
    verify_snapshot,
)
from medsupply.ledger import BUDGET, ContentStore, DisruptionReport, Ledger, RoleRecord, sha256_hex
from medsupply.runner import role_key, simulate
from medsupply.scenario import config_digest, default_config, generate_scenario, resolve_config

MANU = "manufacturer-0"


class Day1:
    def __init__(self, store=None, **kw):
        cfg = resolve_config(default_config(**kw))
        topo = build_topology(cfg)
        self.env = Environment(cfg, generate_scenario(cfg), topo)
        self.ledger = Ledger(epsilon=cfg.epsilon, reserve=cfg.reserve_stock, capacity=cfg.manufacturer_capacity,
                             store=store or ContentStore())
        chash = config_digest(cfg)
        for name in [*topo.manufacturers, *topo.distributors, *topo.hospitals]:
            node = topo.nodes[name]
            self.ledger.register_role(RoleRecord(name, node.role, role_key(chash, name), node.region))
        self.key = role_key(chash, MANU)
        self.hkey = role_key(chash, "hospital-0")
        self.world = initial_world(cfg, topo)
        self.ledger.commit_inventory(MANU, 0, self.world.inventories())
        self.outcome = run_round(1, self.world, self.env, BuiltinPolicy())

    def snapshot(self, outcome=None):
        return build_snapshot(outcome or self.outcome, self.ledger.store)

    def submit(self, snap, who=MANU, key=None):
        mac = sign_payload(key or self.key, self.ledger.store.fetch(snap.cid)) if snap.cid in self.ledger.store else "0" * 64
        return submit_snapshot(self.ledger, snap, who, mac)

    def state(self):
        return copy.deepcopy((self.ledger.committed, self.ledger.reserve, self.ledger.last_day))


def test_serialization_is_canonical():
    a = canonical_serialize(1, {}, {}, [])
    assert a == canonical_serialize(1, {}, {}, [])
    x = canonical_serialize(2, {1: (3, 4), 0: (1, 2)}, {"b": (1,), "a": (2,)}, [
        DisruptionReport("z", "transit_delay", 2, {1: (0, 1)}), DisruptionReport("a", "supply_halt", 2, {})])
    y = canonical_serialize(2, {0: (1, 2), 1: (3, 4)}, {"a": (2,), "b": (1,)}, [
        DisruptionReport("a", "supply_halt", 2, {}), DisruptionReport("z", "transit_delay", 2, {1: (0, 1)})])
    assert x == y
    assert b" " not in x and b"\n" not in x
    assert x.index(b'"allocations"') < x.index(b'"day"') < x.index(b'"version"')


@pytest.mark.parametrize("bad", [1.5, float("nan"), True, "3"])
def test_serialization_rejects_non_integers(bad):
    with pytest.raises(SnapshotFormatError):
        canonical_serialize(1, {0: (bad,)}, {}, [])


vec = st.lists(st.integers(0, 10**9), min_size=2, max_size=2)


@given(
    st.integers(1, 10**4),
    st.dictionaries(st.integers(0, 5), vec, max_size=4),
    st.dictionaries(st.sampled_from(["manufacturer-0", "hospital-1", "distributor-2"]), vec),
    st.lists(st.builds(DisruptionReport, st.sampled_from(["distributor-0", "manufacturer-0"]),
                       st.sampled_from(["supply_halt", "transit_delay"]), st.integers(0, 99),
                       st.dictionaries(st.integers(0, 3), vec.map(tuple), max_size=2)), max_size=3,
             unique_by=lambda r: (r.agent_id, r.event_type)),
    st.dictionaries(st.integers(0, 5), st.floats(0, 1)),
)
@settings(max_examples=200, deadline=None)
def test_serialize_parse_round_trip(day, alloc, inv, reps, fair):
    data = canonical_serialize(day, alloc, inv, reps, requests=alloc, production=(1, 2), fairness=fair)
    p = parse_snapshot(data)
    again = canonical_serialize(p["day"], p["allocations"], p["inventories"], p["disruptions"],
                                requests=p["requests"], production=p["production"], fairness=p["fairness"])
    assert again == data
    assert p["fairness"] == fair


@pytest.mark.parametrize("blob", [b"", b"{}", b"\xff", b'{"day":1}', b'[1,2]'])
def test_parse_refuses_junk(blob):
    with pytest.raises(SnapshotFormatError):
        parse_snapshot(blob)


def test_parse_refuses_non_canonical_spacing():
    good = canonical_serialize(1, {}, {}, [])
    with pytest.raises(SnapshotFormatError):
        parse_snapshot(good.replace(b",", b", ", 1))


def test_build_is_deterministic_and_sensitive():
    d = Day1()
    s1, s2 = d.snapshot(), d.snapshot()
    assert (s1.cid, s1.integrity_hash) == (s2.cid, s2.integrity_hash)
    assert sha256_hex(d.ledger.store.fetch(s1.cid)) == s1.hash_hex
    o = copy.deepcopy(d.outcome)
    a = o.allocations[0]
    o.allocations[0] = dataclasses.replace(a, quantity=(a.quantity[0] + 1,) + a.quantity[1:])
    assert d.snapshot(o).integrity_hash != s1.integrity_hash


def test_happy_path_and_verification():
    d = Day1()
    r = d.submit(d.snapshot())
    assert r.accepted and r.verdict == "accepted"
    rec = d.ledger.chain[r.tx_id]
    assert rec.action == "snapshot_commit" and rec.payload_hash == r.integrity_hash
    assert verify_snapshot(r, d.ledger).ok
    assert d.ledger.last_day == 1
    nxt = apply_outcome(d.world, d.outcome)
    for agent, inv in nxt.inventories().items():
        assert d.ledger.balance(agent, 3) == inv


def test_altered_bytes_are_a_hash_mismatch(tmp_path):
    d = Day1(store=ContentStore(tmp_path))
    snap = d.snapshot()
    mac = sign_snapshot(snap, d.key, d.ledger.store)
    (tmp_path / snap.cid).write_bytes(d.ledger.store.fetch(snap.cid).replace(b'"day":1', b'"day":2'))
    r = submit_snapshot(d.ledger, snap, MANU, mac)
    assert r.reason == HASH_MISMATCH


def test_budget_violation_rolls_back():
    d = Day1()
    o = copy.deepcopy(d.outcome)
    q = d.outcome.end_inventory[MANU][0] + sum(a.quantity[0] for a in o.allocations)
    over = int(q * 1.2)
    o.allocations[0] = dataclasses.replace(o.allocations[0], quantity=(over,) + o.allocations[0].quantity[1:])
    before, n = d.state(), len(d.ledger.chain)
    r = d.submit(d.snapshot(o))
    assert not r.accepted and r.reason == BUDGET
    assert d.state() == before
    assert len(d.ledger.chain) == n + 1 and d.ledger.chain[-1].action == "snapshot_reject"
    # idempotent rejection
    r2 = d.submit(d.snapshot(o))
    assert r2.reason == BUDGET and d.state() == before and len(d.ledger.chain) == n + 2


def test_other_rejection_codes():
    d = Day1()
    snap = d.snapshot()
    assert d.submit(snap, who="hospital-0", key=d.hkey).reason == UNAUTHORIZED
    assert d.submit(snap, key=b"x" * 32).reason == BAD_MAC
    ghost = dataclasses.replace(snap, cid="a" * 64, integrity_hash=bytes.fromhex("a" * 64))
    assert d.submit(ghost).reason == MISSING_CONTENT
    lying = dataclasses.replace(snap, integrity_hash=bytes.fromhex("b" * 64))
    assert d.submit(lying).reason == HASH_MISMATCH
    junk_cid = d.ledger.store.store(b'{"not":"a snapshot"}')
    junk = dataclasses.replace(snap, cid=junk_cid, integrity_hash=bytes.fromhex(junk_cid))
    assert d.submit(junk).reason == MALFORMED
    assert d.submit(snap).accepted
    assert d.submit(snap).reason == STALE


def test_rejection_leaves_one_record_with_reason():
    d = Day1()
    r = d.submit(d.snapshot(), key=b"y" * 32)
    body = d.ledger.store.fetch(d.ledger.chain[r.tx_id].payload_hash)
    assert b'"reason":"bad_mac"' in body


def test_disruption_reports_shape():
    d = Day1(disruption_prob=1.0, seed=3)
    reps = disruption_reports(d.outcome)
    kinds = {(r.agent_id, r.event_type) for r in reps}
    assert ("manufacturer-0", "supply_halt") in kinds
    assert ("distributor-1", "transit_delay") in kinds
    halt = next(r for r in reps if r.event_type == "supply_halt")
    assert set(halt.shortfall) == {0, 1, 2}


def test_missing_store_object_fails_verification(tmp_path):
    res = simulate(default_config(days=5), store_dir=tmp_path / "s")
    r = res.receipts[2]
    (tmp_path / "s" / r.integrity_hash).unlink()
    v = verify_snapshot(r, res.ledger.chain, ContentStore(tmp_path / "s"))
    assert not v.ok and v.reason == "missing_content"


def test_every_receipt_of_a_long_run_verifies():
    res = simulate(default_config(days=60, seed=2, disruption_prob=0.2))
    assert all(verify_snapshot(r, res.ledger).ok for r in res.receipts if r.accepted)
    snaps = [rec for rec in res.ledger.chain if rec.action == "snapshot_commit"]
    assert len(snaps) == 60
    assert len({rec.payload_hash for rec in snaps}) == 60


def test_receipts_csv_round_trip():
    d = Day1()
    bad = d.submit(d.snapshot(), key=b"z" * 32)
    good = d.submit(d.snapshot())
    text = receipts_csv([bad, good])
    assert text.splitlines()[0] == "day,tx_id,hash,verdict"
    back = read_receipts_csv(text)
    assert [(r.tx_id, r.verdict, r.reason) for r in back] == [(bad.tx_id, "rejected", "bad_mac"), (good.tx_id, "accepted", "")]
