"""In-process enforcement ledger.

A single serialized state machine standing in for the on-chain contracts:
permissioned roles, allocation validation, committed inventory balances,
reserve deployment on disruption reports, and an append-only SHA-256 hash
chain of audit records. Payloads live in a content-addressed store keyed by
their SHA-256 digest.

This module deliberately knows nothing about agent policies.
"""

from __future__ import annotations

import copy
import hashlib
import hmac
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .rounding import floor_share, largest_remainder

GENESIS_HASH = "0" * 64
ROLE_CLASSES = ("manufacturer", "distributor", "hospital")
EVENT_TYPES = ("supply_halt", "transit_delay")
ACTIONS = (
    "role_register",
    "inventory_commit",
    "allocation_commit",
    "disruption_commit",
    "reserve_deploy",
    "snapshot_commit",
    "snapshot_reject",
)
MIN_KEY_BYTES = 16

# rejection codes
BUDGET = "budget"
MIN_SUPPORT = "min_support"
SEVERITY = "severity_consistency"
MALFORMED = "malformed_allocation"


class LedgerError(Exception):
    code = "ledger_error"


class UnknownRole(LedgerError):
    code = "unknown_role"


class DuplicateRole(LedgerError):
    code = "duplicate_role"


class MalformedKey(LedgerError):
    code = "malformed_key"


class StaleReport(LedgerError):
    code = "stale_report"


class BatchRejected(LedgerError):
    code = "negative_balance"


class ContentNotFound(LedgerError):
    code = "missing_content"


class ContentCorrupted(LedgerError):
    code = "corrupt_content"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode()


@dataclass(frozen=True)
class RoleRecord:
    role_id: str
    role_class: str
    auth_key: bytes
    region: int | None = None

    def public_bytes(self) -> bytes:
        return canonical_json({
            "role_id": self.role_id,
            "class": self.role_class,
            "region": self.region,
            "key_digest": sha256_hex(self.auth_key),
        })


@dataclass(frozen=True)
class DisruptionReport:
    agent_id: str
    event_type: str
    timestamp: int
    shortfall: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "event_type": self.event_type,
            "timestamp": self.timestamp,
            "shortfall": {str(r): list(v) for r, v in sorted(self.shortfall.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DisruptionReport":
        return cls(d["agent_id"], d["event_type"], d["timestamp"],
                   {int(r): tuple(v) for r, v in d["shortfall"].items()})


@dataclass(frozen=True)
class AuditRecord:
    tx_id: int
    role_id: str
    action: str
    payload_hash: str
    timestamp: int
    prev_hash: str
    record_hash: str

    def canonical_bytes(self) -> bytes:
        return record_preimage(self.tx_id, self.role_id, self.action, self.payload_hash, self.timestamp, self.prev_hash)

    def to_line(self) -> str:
        # insertion order is the canonical field order
        return json.dumps({
            "tx_id": self.tx_id,
            "role_id": self.role_id,
            "action": self.action,
            "payload_hash": self.payload_hash,
            "timestamp": self.timestamp,
            "prev_hash": self.prev_hash,
            "record_hash": self.record_hash,
        }, separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_line(cls, line: str) -> "AuditRecord":
        """Strict parse: the line must be exactly the canonical encoding of the record it decodes to."""
        d = json.loads(line)
        if not isinstance(d, dict) or list(d) != ["tx_id", "role_id", "action", "payload_hash", "timestamp", "prev_hash", "record_hash"]:
            raise ValueError("fields missing or out of canonical order")
        rec = cls(**d)
        if rec.to_line() != line:
            raise ValueError("non-canonical encoding")
        return rec


def record_preimage(tx_id: int, role_id: str, action: str, payload_hash: str, timestamp: int, prev_hash: str) -> bytes:
    return "|".join([str(tx_id), role_id, action, payload_hash, str(timestamp), prev_hash]).encode()


def _is_hex64(s) -> bool:
    return isinstance(s, str) and len(s) == 64 and all(c in "0123456789abcdef" for c in s)


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(chain: Sequence[AuditRecord]) -> ChainVerdict:
    """Recompute every record hash and link; report the earliest inconsistency."""
    prev = GENESIS_HASH
    for i, rec in enumerate(chain):
        if rec.tx_id != i:
            return ChainVerdict(False, i, f"tx_id {rec.tx_id} where {i} expected")
        if rec.action not in ACTIONS:
            return ChainVerdict(False, i, f"unknown action {rec.action!r}")
        if not (_is_hex64(rec.payload_hash) and _is_hex64(rec.prev_hash) and _is_hex64(rec.record_hash)):
            return ChainVerdict(False, i, "hash field is not 64 lowercase hex digits")
        if not isinstance(rec.timestamp, int) or isinstance(rec.timestamp, bool) or rec.timestamp < 0:
            return ChainVerdict(False, i, "bad timestamp")
        if sha256_hex(rec.canonical_bytes()) != rec.record_hash:
            return ChainVerdict(False, i, "record hash mismatch")
        if rec.prev_hash != prev:
            return ChainVerdict(False, i, "broken link to predecessor")
        prev = rec.record_hash
    return ChainVerdict(True)


def parse_chain(data: bytes) -> tuple[list[AuditRecord], ChainVerdict]:
    """Decode an exported chain file; a line that fails to decode is reported at its index."""
    if data and not data.endswith(b"\n"):
        lines = data.split(b"\n")
        return _decode_lines(lines, len(lines) - 1)
    lines = data.split(b"\n")[:-1] if data else []
    return _decode_lines(lines, None)


def _decode_lines(lines: list[bytes], bad_tail: int | None) -> tuple[list[AuditRecord], ChainVerdict]:
    records = []
    for i, raw in enumerate(lines):
        if bad_tail is not None and i == bad_tail:
            return records, ChainVerdict(False, i, "missing line terminator")
        try:
            records.append(AuditRecord.from_line(raw.decode("ascii")))
        except (UnicodeDecodeError, ValueError, TypeError) as exc:
            return records, ChainVerdict(False, i, f"undecodable record: {exc}")
    return records, ChainVerdict(True)


def verify_chain_bytes(data: bytes) -> ChainVerdict:
    records, verdict = parse_chain(data)
    structural = verify_chain(records)
    if not structural.ok:
        return structural
    return verdict


def verify_payloads(chain: Sequence[AuditRecord], store: "ContentStore") -> ChainVerdict:
    """Every record's payload must be present in the store and hash back to its payload_hash."""
    for i, rec in enumerate(chain):
        try:
            store.fetch(rec.payload_hash)
        except ContentNotFound:
            return ChainVerdict(False, i, f"missing content {rec.payload_hash}")
        except ContentCorrupted:
            return ChainVerdict(False, i, f"corrupt content {rec.payload_hash}")
    return ChainVerdict(True)


def chain_to_bytes(chain: Iterable[AuditRecord]) -> bytes:
    return "".join(rec.to_line() + "\n" for rec in chain).encode("ascii")


class ContentStore:
    """SHA-256 addressed blob store; in memory, or a directory of files named by CID."""

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, bytes] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def store(self, payload: bytes) -> str:
        cid = sha256_hex(payload)
        if self.root is None:
            self._mem.setdefault(cid, bytes(payload))
            return cid
        path = self.root / cid
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            tmp.replace(path)
        return cid

    def fetch(self, cid: str) -> bytes:
        if not _is_hex64(cid):
            raise ContentNotFound(f"not a content id: {cid!r}")
        if self.root is None:
            if cid not in self._mem:
                raise ContentNotFound(cid)
            data = self._mem[cid]
        else:
            path = self.root / cid
            if not path.is_file():
                raise ContentNotFound(cid)
            data = path.read_bytes()
        if sha256_hex(data) != cid:
            raise ContentCorrupted(cid)
        return data

    def __contains__(self, cid: str) -> bool:
        if self.root is None:
            return cid in self._mem
        return (self.root / cid).is_file()

    def cids(self) -> list[str]:
        if self.root is None:
            return sorted(self._mem)
        return sorted(p.name for p in self.root.iterdir() if _is_hex64(p.name))

    def copy_to(self, root: str | Path) -> "ContentStore":
        out = ContentStore(root)
        for cid in self.cids():
            out.store(self.fetch(cid))
        return out


@dataclass(frozen=True)
class Verdict:
    reasons: tuple[str, ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.reasons

    @property
    def code(self) -> str | None:
        return self.reasons[0] if self.reasons else None

    def __bool__(self) -> bool:
        return self.accepted


def validate_allocation(
    alloc: Mapping[int, int],
    available: int,
    epsilon: float,
    fairness: Mapping[int, float],
    demand: Mapping[int, int] | None = None,
) -> Verdict:
    """Check one drug's regional allocation.

    * budget: sum(x) <= available
    * min_support: x_r >= floor(epsilon * available) for every demanding region,
      relaxed to the region's own demand when that is smaller
    * severity_consistency: phi_r >= phi_r' implies x_r >= x_r' - 1, unless region r
      received its full demand

    Without ``demand`` every region counts as demanding and none as capped.
    All failing checks are reported, in the order above.
    """
    regions = sorted(alloc)
    x = {r: alloc[r] for r in regions}
    if any(isinstance(v, bool) or not isinstance(v, int) or v < 0 for v in x.values()) or set(fairness) != set(regions):
        return Verdict((MALFORMED,))
    if any(not math.isfinite(f) for f in fairness.values()):
        return Verdict((MALFORMED,))
    reasons = []
    if sum(x.values()) > available:
        reasons.append(BUDGET)
    floor = floor_share(epsilon, available)
    for r in regions:
        want = None if demand is None else demand.get(r, 0)
        if want == 0:
            continue
        need = floor if want is None else min(floor, want)
        if x[r] < need:
            reasons.append(MIN_SUPPORT)
            break
    done = False
    for r in regions:
        if demand is not None and x[r] >= demand.get(r, 0):
            continue
        for q in regions:
            if q != r and fairness[r] >= fairness[q] and x[r] < x[q] - 1:
                reasons.append(SEVERITY)
                done = True
                break
        if done:
            break
    return Verdict(tuple(reasons))


@dataclass(frozen=True)
class TxReceipt:
    tx_id: int
    record: AuditRecord


class Ledger:
    """Serialized enforcement state. Every mutation appends to the audit chain."""

    def __init__(
        self,
        *,
        epsilon: float,
        reserve: Sequence[int],
        capacity: Sequence[int] | None = None,
        store: ContentStore | None = None,
    ) -> None:
        self.epsilon = epsilon
        self.reserve = [int(v) for v in reserve]
        self.initial_reserve = tuple(self.reserve)
        self.capacity = tuple(capacity) if capacity is not None else None
        self.store = store if store is not None else ContentStore()
        self.roles: dict[str, RoleRecord] = {}
        self.committed: dict[str, tuple[int, ...]] = {}
        self.chain: list[AuditRecord] = []
        self.last_day = 0  # day of the most recent committed snapshot
        self.deployed_total = [0] * len(self.reserve)

    # -- chain ----------------------------------------------------------------

    @property
    def head_hash(self) -> str:
        return self.chain[-1].record_hash if self.chain else GENESIS_HASH

    def append_audit(self, action: str, role_id: str, payload_hash: str, day: int) -> AuditRecord:
        if role_id not in self.roles:
            raise UnknownRole(role_id)
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        if not _is_hex64(payload_hash):
            raise ValueError("payload_hash must be 64 lowercase hex digits")
        tx_id = len(self.chain)
        prev = self.head_hash
        digest = sha256_hex(record_preimage(tx_id, role_id, action, payload_hash, day, prev))
        rec = AuditRecord(tx_id, role_id, action, payload_hash, day, prev, digest)
        self.chain.append(rec)
        return rec

    def log(self, action: str, role_id: str, payload: bytes, day: int) -> AuditRecord:
        """Store ``payload`` and append a record pointing at it."""
        if role_id not in self.roles:
            raise UnknownRole(role_id)
        return self.append_audit(action, role_id, self.store.store(payload), day)

    @contextmanager
    def transaction(self):
        """All-or-nothing: any exception restores the state as it was on entry."""
        saved = (copy.deepcopy(self.committed), list(self.reserve), len(self.chain), list(self.deployed_total), self.last_day)
        try:
            yield
        except BaseException:
            self.committed, self.reserve, n, self.deployed_total, self.last_day = saved
            del self.chain[n:]
            raise

    # -- roles ------------------------------------------------------------------

    def register_role(self, record: RoleRecord, day: int = 0) -> TxReceipt:
        if record.role_id in self.roles:
            raise DuplicateRole(record.role_id)
        if record.role_class not in ROLE_CLASSES:
            raise LedgerError(f"unknown role class {record.role_class!r}")
        if not isinstance(record.auth_key, (bytes, bytearray)) or len(record.auth_key) < MIN_KEY_BYTES:
            raise MalformedKey(record.role_id)
        self.roles[record.role_id] = record
        try:
            rec = self.log("role_register", record.role_id, record.public_bytes(), day)
        except Exception:
            del self.roles[record.role_id]
            raise
        return TxReceipt(rec.tx_id, rec)

    def require_role(self, role_id: str, role_class: str | None = None) -> RoleRecord:
        rec = self.roles.get(role_id)
        if rec is None:
            raise UnknownRole(role_id)
        if role_class is not None and rec.role_class != role_class:
            raise LedgerError(f"{role_id} is a {rec.role_class}, not a {role_class}")
        return rec

    def check_mac(self, role_id: str, payload: bytes, mac: str) -> bool:
        key = self.require_role(role_id).auth_key
        expected = hmac.new(key, payload, hashlib.sha256).hexdigest()
        return isinstance(mac, str) and hmac.compare_digest(expected, mac)

    def region_roles(self, role_class: str) -> dict[int, str]:
        return {r.region: r.role_id for r in self.roles.values() if r.role_class == role_class and r.region is not None}

    # -- inventory ----------------------------------------------------------------

    def commit_inventory(self, role_id: str, day: int, transitions: Mapping[str, Sequence[int]]) -> TxReceipt:
        """Apply per-agent deltas atomically; a batch that drives any balance negative is rejected whole."""
        self.require_role(role_id)
        updated = {}
        for agent, delta in sorted(transitions.items()):
            self.require_role(agent)
            cur = self.committed.get(agent, (0,) * len(delta))
            if len(cur) != len(delta):
                raise BatchRejected(f"{agent}: delta has {len(delta)} drugs, balance has {len(cur)}")
            new = tuple(int(a) + int(b) for a, b in zip(cur, delta))
            if any(v < 0 for v in new):
                raise BatchRejected(f"{agent}: balance {cur} + {tuple(delta)} would go negative")
            updated[agent] = new
        payload = canonical_json({"day": day, "transitions": {a: list(map(int, v)) for a, v in sorted(transitions.items())}})
        with self.transaction():
            self.committed.update(updated)
            rec = self.log("inventory_commit", role_id, payload, day)
        return TxReceipt(rec.tx_id, rec)

    def balance(self, agent: str, num_drugs: int) -> tuple[int, ...]:
        return self.committed.get(agent, (0,) * num_drugs)

    # -- disruptions ----------------------------------------------------------------

    def report_disruption(self, report: DisruptionReport, current_day: int) -> dict[int, tuple[int, ...]]:
        """Log a report and deploy min(reserve, shortfall) per drug to the affected regions.

        Shortfall is keyed by region; when the reserve cannot cover all of it the
        deployment is split in proportion to each region's shortfall.
        """
        reporter = self.require_role(report.agent_id)
        if report.event_type not in EVENT_TYPES:
            raise LedgerError(f"unknown event type {report.event_type!r}")
        if report.timestamp != current_day:
            raise StaleReport(f"report dated {report.timestamp} submitted on day {current_day}")
        if reporter.role_class == "distributor" and set(report.shortfall) - {reporter.region}:
            raise LedgerError(f"{report.agent_id} may only claim shortfall for region {reporter.region}")
        ndrugs = len(self.reserve)
        regions = sorted(report.shortfall)
        deploy = {r: [0] * ndrugs for r in regions}
        for d in range(ndrugs):
            want = [max(0, int(report.shortfall[r][d])) for r in regions]
            total = min(self.reserve[d], sum(want))
            if total == sum(want):
                split = want
            else:
                split = largest_remainder(want, total)
            for r, q in zip(regions, split):
                deploy[r][d] = q
            self.reserve[d] -= total
            self.deployed_total[d] += total
        out = {r: tuple(v) for r, v in deploy.items()}
        self.log("disruption_commit", report.agent_id, canonical_json(report.to_dict()), current_day)
        body = {"report": report.to_dict(), "deployed": {str(r): list(v) for r, v in out.items()}}
        self.log("reserve_deploy", report.agent_id, canonical_json(body), current_day)
        return out

    # -- queries ----------------------------------------------------------------

    def records_on(self, day: int) -> list[AuditRecord]:
        return [r for r in self.chain if r.timestamp == day]

    def verify(self) -> ChainVerdict:
        return verify_chain(self.chain)
