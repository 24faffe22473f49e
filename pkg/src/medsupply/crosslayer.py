"""Bridge from the daily coordination outcome to the enforcement ledger.

A snapshot bundles the day's allocations, end-of-day inventories and
disruption reports. Its canonical bytes are stored content-addressed, so the
CID and the integrity hash are the same SHA-256 value. The designated
submitter (the manufacturer) authenticates the bytes with an HMAC.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .coordination import RoundOutcome
from .ledger import (
    AuditRecord,
    ContentCorrupted,
    ContentNotFound,
    ContentStore,
    DisruptionReport,
    Ledger,
    LedgerError,
    canonical_json,
    sha256_hex,
    validate_allocation,
    verify_chain,
)

SNAPSHOT_VERSION = 1
SNAPSHOT_KEYS = ("allocations", "day", "disruptions", "fairness", "inventories", "production", "requests", "version")

# rejection codes beyond the allocation checks
UNAUTHORIZED = "unauthorized"
MISSING_CONTENT = "missing_content"
HASH_MISMATCH = "hash_mismatch"
BAD_MAC = "bad_mac"
MALFORMED = "malformed_snapshot"
STALE = "stale_snapshot"
PRODUCTION = "production_exceeds_capacity"
INVENTORY_MISMATCH = "inventory_mismatch"


class SnapshotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Snapshot:
    day: int
    allocations: Mapping[int, tuple[int, ...]]
    inventories: Mapping[str, tuple[int, ...]]
    disruptions: tuple[DisruptionReport, ...]
    cid: str
    integrity_hash: bytes
    requests: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    production: tuple[int, ...] = ()
    fairness: Mapping[int, float] = field(default_factory=dict)

    @property
    def hash_hex(self) -> str:
        return self.integrity_hash.hex()


@dataclass(frozen=True)
class SubmissionReceipt:
    tx_id: int
    day: int
    integrity_hash: str
    verdict: str  # accepted | rejected
    reason: str = ""
    deployments: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.verdict == "accepted"


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and not math.isfinite(v):
            raise SnapshotFormatError(f"{where}: non-finite quantity {v!r}")
        raise SnapshotFormatError(f"{where}: non-integer quantity {v!r}")
    return v


def _vec(v, where: str) -> list[int]:
    if isinstance(v, (str, bytes)) or not hasattr(v, "__iter__"):
        raise SnapshotFormatError(f"{where}: expected a per-drug list")
    return [_int(x, where) for x in v]


def _region_key(r, where: str) -> str:
    return str(_int(r, where))


def _float_text(f, where: str) -> str:
    if isinstance(f, bool) or not isinstance(f, (int, float)) or not math.isfinite(f):
        raise SnapshotFormatError(f"{where}: weight must be a finite number, got {f!r}")
    return repr(float(f))


def canonical_serialize(
    day: int,
    allocations: Mapping[int, Sequence[int]],
    inventories: Mapping[str, Sequence[int]],
    disruptions: Sequence[DisruptionReport],
    *,
    requests: Mapping[int, Sequence[int]] | None = None,
    production: Sequence[int] = (),
    fairness: Mapping[int, float] | None = None,
) -> bytes:
    """Deterministic bytes: sorted keys, compact separators, integer quantities.

    Fairness weights are carried as the shortest round-trip decimal text of the
    float, so they hash identically on every platform.
    """
    doc = {
        "version": SNAPSHOT_VERSION,
        "day": _int(day, "day"),
        "allocations": {_region_key(r, "allocations"): _vec(v, f"allocations[{r}]") for r, v in allocations.items()},
        "inventories": {str(a): _vec(v, f"inventories[{a}]") for a, v in inventories.items()},
        "disruptions": [
            {
                "agent_id": str(rep.agent_id),
                "event_type": str(rep.event_type),
                "timestamp": _int(rep.timestamp, "timestamp"),
                "shortfall": {_region_key(r, "shortfall"): _vec(v, "shortfall") for r, v in rep.shortfall.items()},
            }
            for rep in sorted(disruptions, key=lambda rep: (rep.agent_id, rep.event_type))
        ],
        "requests": {_region_key(r, "requests"): _vec(v, f"requests[{r}]") for r, v in (requests or {}).items()},
        "production": _vec(production, "production"),
        "fairness": {_region_key(r, "fairness"): _float_text(f, f"fairness[{r}]") for r, f in (fairness or {}).items()},
    }
    return canonical_json(doc)


def parse_snapshot(payload: bytes) -> dict:
    """Inverse of :func:`canonical_serialize`; non-canonical input is refused."""
    try:
        doc = json.loads(payload.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise SnapshotFormatError(f"undecodable payload: {exc}") from None
    if not isinstance(doc, dict) or sorted(doc) != list(SNAPSHOT_KEYS):
        raise SnapshotFormatError("payload fields do not match the snapshot schema")
    if doc["version"] != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {doc['version']!r}")
    try:
        reports = tuple(
            DisruptionReport(d["agent_id"], d["event_type"], d["timestamp"],
                             {int(r): tuple(v) for r, v in d["shortfall"].items()})
            for d in doc["disruptions"]
        )
        fairness = {}
        for r, text in doc["fairness"].items():
            if not isinstance(text, str):
                raise SnapshotFormatError("fairness weights must be decimal text")
            fairness[int(r)] = float(text)
        parsed = {
            "day": doc["day"],
            "allocations": {int(r): tuple(v) for r, v in doc["allocations"].items()},
            "inventories": {a: tuple(v) for a, v in doc["inventories"].items()},
            "disruptions": reports,
            "requests": {int(r): tuple(v) for r, v in doc["requests"].items()},
            "production": tuple(doc["production"]),
            "fairness": fairness,
        }
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise SnapshotFormatError(f"malformed snapshot: {exc!r}") from None
    again = canonical_serialize(
        parsed["day"], parsed["allocations"], parsed["inventories"], parsed["disruptions"],
        requests=parsed["requests"], production=parsed["production"], fairness=parsed["fairness"],
    )
    if again != payload:
        raise SnapshotFormatError("payload is not in canonical form")
    return parsed


def disruption_reports(outcome: RoundOutcome) -> tuple[DisruptionReport, ...]:
    """One report per disrupted agent.

    A halted manufacturer claims every region's requested units; a delayed
    distributor claims the orders it could not fill that day.
    """
    reports = []
    D = len(next(iter(outcome.produced.values()), ()))
    requests = {a.region: tuple(a.total) for a in outcome.aggregates}
    region_of = {a.distributor: a.region for a in outcome.aggregates}
    shipped = {f.hospital: f.quantity for f in outcome.fulfillments}
    for agent, hit in sorted(outcome.disrupted.items()):
        if not hit:
            continue
        if agent.startswith("manufacturer"):
            reports.append(DisruptionReport(agent, "supply_halt", outcome.day, dict(sorted(requests.items()))))
        else:
            unmet = [0] * D
            for o in outcome.orders:
                if o.distributor == agent:
                    y = shipped.get(o.hospital, (0,) * D)
                    for d in range(D):
                        unmet[d] += o.quantity[d] - y[d]
            reports.append(DisruptionReport(agent, "transit_delay", outcome.day, {region_of[agent]: tuple(unmet)}))
    return tuple(sorted(reports, key=lambda r: (r.agent_id, r.event_type)))


def build_snapshot(outcome: RoundOutcome, store: ContentStore) -> Snapshot:
    if outcome.end_inventory is None:
        raise ValueError(f"outcome for day {outcome.day} is not finalized")
    allocations = {a.region: tuple(a.quantity) for a in outcome.allocations}
    fairness = {a.region: float(a.fairness) for a in outcome.allocations}
    requests = {a.region: tuple(a.total) for a in outcome.aggregates}
    production = tuple(sum(col) for col in zip(*outcome.produced.values())) if outcome.produced else ()
    reports = disruption_reports(outcome)
    payload = canonical_serialize(
        outcome.day, allocations, outcome.end_inventory, reports,
        requests=requests, production=production, fairness=fairness,
    )
    cid = store.store(payload)
    return Snapshot(
        outcome.day, allocations, dict(outcome.end_inventory), reports, cid, bytes.fromhex(cid),
        requests, production, fairness,
    )


def sign_payload(key: bytes, payload: bytes) -> str:
    return hmac.new(key, payload, hashlib.sha256).hexdigest()


def sign_snapshot(snapshot: Snapshot, key: bytes, store: ContentStore) -> str:
    return sign_payload(key, store.fetch(snapshot.cid))


class _Reject(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        super().__init__(detail or code)
        self.code = code


def submit_snapshot(ledger: Ledger, snapshot: Snapshot, submitter: str, mac: str) -> SubmissionReceipt:
    """Validate and commit one day's snapshot; a rejection leaves only a rejection record behind.

    Checks run in order: submitter class, stored bytes against the claimed hash,
    MAC, schema, day sequencing, declared production, per-drug allocation
    validity, manufacturer stock consistency. The commit itself is atomic.
    """
    role = ledger.require_role(submitter)
    hash_hex = snapshot.integrity_hash.hex() if isinstance(snapshot.integrity_hash, bytes) else ""
    try:
        if role.role_class != "manufacturer":
            raise _Reject(UNAUTHORIZED, f"{submitter} is not a manufacturer")
        try:
            payload = ledger.store.fetch(snapshot.cid)
        except ContentNotFound:
            raise _Reject(MISSING_CONTENT) from None
        except ContentCorrupted:
            raise _Reject(HASH_MISMATCH, "stored bytes do not match their address") from None
        if sha256_hex(payload) != hash_hex or snapshot.cid != hash_hex:
            raise _Reject(HASH_MISMATCH)
        if not ledger.check_mac(submitter, payload, mac):
            raise _Reject(BAD_MAC)
        try:
            snap = parse_snapshot(payload)
        except SnapshotFormatError as exc:
            raise _Reject(MALFORMED, str(exc)) from None
        day = snap["day"]
        if day != snapshot.day:
            raise _Reject(MALFORMED, "payload day differs from the declared day")
        if day != ledger.last_day + 1:
            raise _Reject(STALE, f"expected day {ledger.last_day + 1}, got {day}")
        deployments = _commit(ledger, snap, submitter, payload)
    except _Reject as rej:
        body = canonical_json({"day": snapshot.day, "integrity_hash": hash_hex, "reason": rej.code})
        rec = ledger.log("snapshot_reject", submitter, body, snapshot.day)
        return SubmissionReceipt(rec.tx_id, snapshot.day, hash_hex, "rejected", rej.code)
    rec = ledger.chain[-1]
    return SubmissionReceipt(rec.tx_id, snapshot.day, hash_hex, "accepted", "", deployments)


def _commit(ledger: Ledger, snap: dict, submitter: str, payload: bytes) -> dict[int, tuple[int, ...]]:
    day = snap["day"]
    alloc, requests, fairness = snap["allocations"], snap["requests"], snap["fairness"]
    ndrugs = len(ledger.reserve)
    production = snap["production"]
    regions = sorted(ledger.region_roles("distributor"))
    if sorted(alloc) != regions or sorted(requests) != regions or sorted(fairness) != regions:
        raise _Reject(MALFORMED, "snapshot regions do not match the registered distributors")
    if len(production) != ndrugs or any(len(v) != ndrugs for v in (*alloc.values(), *requests.values())):
        raise _Reject(MALFORMED, "per-drug vectors have the wrong length")
    if any(q < 0 for q in production) or any(q < 0 for v in requests.values() for q in v):
        raise _Reject(MALFORMED, "negative production or request")
    halted = any(r.agent_id == submitter and r.event_type == "supply_halt" for r in snap["disruptions"])
    if ledger.capacity is not None and any(p > c for p, c in zip(production, ledger.capacity)):
        raise _Reject(PRODUCTION)
    if halted and any(production):
        raise _Reject(PRODUCTION, "production declared on a supply-halt day")
    stock = ledger.balance(submitter, ndrugs)
    for d in range(ndrugs):
        q = 0 if halted else stock[d] + production[d]
        verdict = validate_allocation(
            {r: alloc[r][d] for r in regions}, q, ledger.epsilon, fairness,
            demand={r: requests[r][d] for r in regions},
        )
        if not verdict:
            raise _Reject(verdict.code, f"drug {d}")
        end = snap["inventories"].get(submitter)
        if end is None or end[d] != stock[d] + production[d] - sum(alloc[r][d] for r in regions):
            raise _Reject(INVENTORY_MISMATCH, f"drug {d}")
    deltas = {}
    for agent, inv in snap["inventories"].items():
        if agent not in ledger.roles or len(inv) != ndrugs:
            raise _Reject(MALFORMED, f"inventory for unknown agent {agent}")
        cur = ledger.balance(agent, ndrugs)
        deltas[agent] = tuple(a - b for a, b in zip(inv, cur))
    deployments: dict[int, tuple[int, ...]] = {}
    try:
        with ledger.transaction():
            ledger.log("allocation_commit", submitter,
                       canonical_json({"day": day, "allocations": {str(r): list(v) for r, v in sorted(alloc.items())}}), day)
            ledger.commit_inventory(submitter, day, deltas)
            for rep in snap["disruptions"]:
                for r, v in ledger.report_disruption(rep, day).items():
                    deployments[r] = tuple(a + b for a, b in zip(deployments.get(r, (0,) * ndrugs), v))
            ledger.last_day = day
            ledger.log("snapshot_commit", submitter, payload, day)
    except LedgerError as exc:
        raise _Reject(exc.code, str(exc)) from None
    return deployments


@dataclass(frozen=True)
class SnapshotVerdict:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_snapshot(
    receipt: SubmissionReceipt,
    chain: Ledger | Sequence[AuditRecord],
    store: ContentStore | None = None,
) -> SnapshotVerdict:
    """Check an accepted receipt against an audit chain and content store (a live ledger or exported copies)."""
    if isinstance(chain, Ledger):
        chain, store = chain.chain, store or chain.store
    if store is None:
        raise ValueError("a content store is required")
    if not receipt.accepted:
        return SnapshotVerdict(False, "not_accepted")
    if not 0 <= receipt.tx_id < len(chain):
        return SnapshotVerdict(False, "unknown_tx")
    prefix = verify_chain(chain[: receipt.tx_id + 1])
    if not prefix:
        return SnapshotVerdict(False, f"chain_invalid_at_{prefix.index}")
    rec = chain[receipt.tx_id]
    if rec.action != "snapshot_commit" or rec.timestamp != receipt.day:
        return SnapshotVerdict(False, "audit_link_mismatch")
    if rec.payload_hash != receipt.integrity_hash:
        return SnapshotVerdict(False, "hash_mismatch")
    try:
        payload = store.fetch(rec.payload_hash)
    except ContentNotFound:
        return SnapshotVerdict(False, "missing_content")
    except ContentCorrupted:
        return SnapshotVerdict(False, "corrupt_content")
    try:
        if parse_snapshot(payload)["day"] != receipt.day:
            return SnapshotVerdict(False, "audit_link_mismatch")
    except SnapshotFormatError:
        return SnapshotVerdict(False, "malformed_snapshot")
    return SnapshotVerdict(True)


RECEIPT_HEADER = ("day", "tx_id", "hash", "verdict")


def receipts_csv(receipts: Sequence[SubmissionReceipt]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECEIPT_HEADER)
    for r in receipts:
        w.writerow((r.day, r.tx_id, r.integrity_hash, r.verdict if r.accepted else f"rejected:{r.reason}"))
    return buf.getvalue()


def read_receipts_csv(text: str) -> list[SubmissionReceipt]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECEIPT_HEADER:
        raise ValueError("not a receipts file")
    out = []
    for day, tx, h, verdict in rows[1:]:
        status, _, reason = verdict.partition(":")
        out.append(SubmissionReceipt(int(tx), int(day), h, status, reason))
    return out
