"""End-to-end run: coordinate each day, snapshot it, submit it to the ledger, log everything.

:func:`simulate` does the work in memory (optionally backing the content store
with a directory); :func:`write_run` exports a self-contained run directory.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .coordination import (
    BuiltinPolicy,
    Environment,
    InvariantViolation,
    RoundOutcome,
    apply_deployments,
    apply_outcome,
    build_topology,
    initial_world,
    run_round,
)
from .crosslayer import SubmissionReceipt, build_snapshot, receipts_csv, sign_snapshot, submit_snapshot
from .ledger import ContentStore, Ledger, RoleRecord, chain_to_bytes
from .metrics import (
    AllocationRow,
    Event,
    HospitalDay,
    MetricsReport,
    RunLogs,
    allocations_csv,
    events_csv,
    hospital_csv,
    service_summary,
    write_reports,
)
from .scenario import ScenarioConfig, Timeline, config_digest, config_to_dict, generate_scenario, resolve_config

ROUND_LOG_HEADER = ("day", "msg_type", "src", "dst", "drug", "quantity")
FLOW_HEADER = (
    "day", "drug", "produced", "consumed", "reserve_in", "on_hand", "in_transit",
    "cum_initial", "cum_produced", "cum_reserve", "cum_consumed",
)


def role_key(config_hash: str, role_id: str) -> bytes:
    """Deterministic per-role MAC key, so replays reproduce the audit chain."""
    return hashlib.sha256(f"{config_hash}|auth|{role_id}".encode()).digest()


@dataclass
class RunResult:
    config: ScenarioConfig
    timeline: Timeline
    policy_name: str
    outcomes: list[RoundOutcome]
    receipts: list[SubmissionReceipt]
    ledger: Ledger
    events: list[Event]
    hospital_days: list[HospitalDay]
    allocation_rows: list[AllocationRow]
    flows: list[tuple]
    distributor_rows: list[tuple]
    round_log: list[tuple] = field(default_factory=list)
    report: MetricsReport | None = None

    @property
    def head_hash(self) -> str:
        return self.ledger.head_hash

    def logs(self) -> RunLogs:
        return RunLogs(
            self.config.horizon_days, self.hospital_days, self.allocation_rows,
            list(self.ledger.chain), self.events, self.ledger.store,
        )


def _attempt(day, world, env, policy, ledger, manu, key):
    outcome = run_round(day, world, env, policy)
    nxt = apply_outcome(world, outcome)
    snap = build_snapshot(outcome, ledger.store)
    mac = sign_snapshot(snap, key, ledger.store)
    receipt = submit_snapshot(ledger, snap, manu, mac)
    return outcome, nxt, receipt


def simulate(config: ScenarioConfig, policy=None, *, store_dir: str | Path | None = None) -> RunResult:
    """Run the full horizon. Raises :class:`InvariantViolation` if any invariant breaks."""
    cfg = resolve_config(config)
    timeline = generate_scenario(cfg)
    topo = build_topology(cfg)
    env = Environment(cfg, timeline, topo)
    policy = policy or BuiltinPolicy()
    builtin = BuiltinPolicy()
    D = cfg.num_drugs
    chash = config_digest(cfg)

    ledger = Ledger(epsilon=cfg.epsilon, reserve=cfg.reserve_stock, capacity=cfg.manufacturer_capacity,
                    store=ContentStore(store_dir))
    for name in [*topo.manufacturers, *topo.distributors, *topo.hospitals]:
        node = topo.nodes[name]
        ledger.register_role(RoleRecord(name, node.role, role_key(chash, name), node.region))
    manu = topo.manufacturers[0]
    key = role_key(chash, manu)
    world = initial_world(cfg, topo)
    ledger.commit_inventory(manu, 0, world.inventories())

    initial = world.on_hand()
    cum_prod, cum_res, cum_cons = [0] * D, [0] * D, [0] * D
    res = RunResult(cfg, timeline, policy.name, [], [], ledger, [], [], [], [], [])
    crit = cfg.drug_criticality

    for day in range(1, cfg.horizon_days + 1):
        outcome, nxt, receipt = _attempt(day, world, env, policy, ledger, manu, key)
        res.events += _drain(policy)
        if not receipt.accepted and policy is not builtin:
            res.events.append(Event(day, "snapshot_reject", manu, receipt.reason))
            res.receipts.append(receipt)
            outcome, nxt, receipt = _attempt(day, world, env, builtin, ledger, manu, key)
        if not receipt.accepted:
            raise InvariantViolation("snapshot_rejected", f"day {day}: ledger rejected the snapshot ({receipt.reason})")
        res.receipts.append(receipt)
        res.outcomes.append(outcome)
        world, extra = apply_deployments(nxt, day, receipt.deployments, topo)

        for agent, hit in sorted(outcome.disrupted.items()):
            if hit:
                res.events.append(Event(day, "disruption", agent, "supply_halt" if agent == manu else "transit_delay"))
        reserve_in = [0] * D
        for s in extra:
            reserve_in[s.drug] += s.quantity
            res.events.append(Event(day, "reserve_deploy", s.dst, f"drug {s.drug} units {s.quantity}"))

        res.round_log += outcome.log_rows()
        res.round_log += [(day, "reserve_deploy", "reserve", s.dst, s.drug, s.quantity) for s in extra]

        ordered = {o.hospital: o.quantity for o in outcome.orders}
        shipped = {f.hospital: f.quantity for f in outcome.fulfillments}
        for h in topo.hospitals:
            st = world.hospitals[h]
            for d in range(D):
                res.hospital_days.append(HospitalDay(
                    day, h, d, st.buffer_target[d], outcome.post_delivery[h][d], outcome.demand[h][d],
                    outcome.served_on_time[h][d], outcome.consumption[h][d], outcome.backlog[h][d],
                    st.inventory[d], ordered[h][d], shipped[h][d],
                ))
        for a in outcome.allocations:
            infected = timeline.infected(a.region, day)
            for d in range(D):
                res.allocation_rows.append(AllocationRow(day, a.region, d, a.quantity[d], a.fairness, infected * crit[d]))
        agg = {a.distributor: a.total for a in outcome.aggregates}
        for dist in topo.distributors:
            st = world.distributors[dist]
            sent = [0] * D
            for f in outcome.fulfillments:
                if f.distributor == dist:
                    sent = [x + y for x, y in zip(sent, f.quantity)]
            received = [0] * D
            for s in outcome.delivered:
                if s.dst == dist:
                    received[s.drug] += s.quantity
            for d in range(D):
                res.distributor_rows.append((day, dist, d, received[d], agg[dist][d], sent[d], st.inventory[d],
                                             st.pipeline[d], int(outcome.disrupted[dist])))

        on_hand, transit = world.on_hand(), world.in_transit()
        for d in range(D):
            made = sum(v[d] for v in outcome.produced.values())
            used = sum(v[d] for v in outcome.consumption.values())
            cum_prod[d] += made
            cum_res[d] += reserve_in[d]
            cum_cons[d] += used
            if initial[d] + cum_prod[d] + cum_res[d] != cum_cons[d] + on_hand[d] + transit[d]:
                raise InvariantViolation("goods_conservation", f"day {day} drug {d}: cumulative balance broken")
            res.flows.append((day, d, made, used, reserve_in[d], on_hand[d], transit[d],
                              initial[d], cum_prod[d], cum_res[d], cum_cons[d]))

    res.report = service_summary(res.logs())
    return res


def _drain(policy) -> list[Event]:
    drain = getattr(policy, "drain_events", None)
    return drain() if drain else []


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def round_log_csv(rows) -> str:
    return _csv(ROUND_LOG_HEADER, rows)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_run(result: RunResult, out_dir: str | Path, *, started_at: str | None = None) -> dict:
    """Export every artifact of a finished run; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_dir = out / "store"
    if result.ledger.store.root is None or result.ledger.store.root.resolve() != store_dir.resolve():
        result.ledger.store.copy_to(store_dir)
    files = {
        "config.json": (json.dumps(config_to_dict(result.config), indent=2, sort_keys=True) + "\n").encode(),
        "round_log.csv": round_log_csv(result.round_log).encode(),
        "audit_chain.jsonl": chain_to_bytes(result.ledger.chain),
        "receipts.csv": receipts_csv(result.receipts).encode(),
        "epidemic.csv": result.timeline.sir_csv().encode(),
        "demand.csv": result.timeline.demand_csv().encode(),
        "hospital_daily.csv": hospital_csv(result.hospital_days).encode(),
        "distributor_daily.csv": _csv(
            ("day", "distributor", "drug", "received", "requested", "shipped", "end_inventory", "pipeline", "disrupted"),
            result.distributor_rows,
        ).encode(),
        "allocations.csv": allocations_csv(result.allocation_rows).encode(),
        "daily_flows.csv": _csv(FLOW_HEADER, result.flows).encode(),
        "events.csv": events_csv(result.events).encode(),
    }
    for name, data in files.items():
        _atomic_write(out / name, data)
    write_reports(result.report, out)
    manifest = {
        "version": __version__,
        "config": config_to_dict(result.config),
        "config_hash": config_digest(result.config),
        "seed": result.config.seed,
        "policy": result.policy_name,
        "started_at": started_at or _now(),
        "finished_at": _now(),
        "output_dir": str(out.resolve()),
        "audit_head_hash": result.head_hash,
        "audit_chain_length": len(result.ledger.chain),
        "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
