"""Evaluation metrics over run logs: recovery time, fairness deviation,
fulfillment efficiency, throughput, auditability and service level.

Everything here is a pure function of logged tables, so the same numbers come
out whether the logs are held in memory or read back from a run directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ledger import AuditRecord, ContentStore, parse_chain, verify_chain, verify_payloads

SCHEMA_VERSION = 1
DEFAULT_THETA_FRAC = 0.1
UNRECOVERED = math.inf


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    start_day: int
    tau: float  # days to recover; UNRECOVERED if never back at the buffer

    @property
    def recovered(self) -> bool:
        return math.isfinite(self.tau)


def resilience(series: Sequence[float], theta: float, buffer: float, first_day: int = 1) -> list[Episode]:
    """Stockout episodes in an inventory series.

    An episode opens on a day with inventory below ``theta`` and closes at the
    first later day with inventory at or above ``buffer``; tau is the gap.
    Days below ``theta`` inside an open episode do not start new ones.
    """
    if not theta < buffer:
        raise ValueError("stockout threshold must lie below the buffer target")
    out = []
    t, n = 0, len(series)
    while t < n:
        if series[t] < theta:
            end = next((u for u in range(t + 1, n) if series[u] >= buffer), None)
            if end is None:
                out.append(Episode(first_day + t, UNRECOVERED))
                break
            out.append(Episode(first_day + t, end - t))
            t = end
        t += 1
    return out


def fairness_deviation(alloc: Sequence[float], weights: Sequence[float]) -> list[float] | None:
    """|x_r / sum x - w_r / sum w| per region; None when exactly one side is all zero."""
    if len(alloc) != len(weights):
        raise ValueError("allocation and weight vectors differ in length")
    sx, sw = math.fsum(alloc), math.fsum(weights)
    if sx <= 0 and sw <= 0:
        return [0.0] * len(alloc)
    if sx <= 0 or sw <= 0:
        return None
    return [abs(x / sx - w / sw) for x, w in zip(alloc, weights)]


def fulfillment_efficiency(fulfilled: Sequence[int], requested: Sequence[int]) -> float | None:
    """Share of requested units shipped; None on a day nobody asked for anything."""
    total = sum(requested)
    if total == 0:
        return None
    return sum(fulfilled) / total


def throughput_series(chain: Sequence[AuditRecord], days: Iterable[int]) -> dict[int, int]:
    verdict = verify_chain(chain)
    if not verdict:
        raise MetricsError(f"audit chain fails verification at record {verdict.index}: {verdict.reason}")
    counts = Counter(rec.timestamp for rec in chain)
    return {t: counts.get(t, 0) for t in days}


def throughput(chain: Sequence[AuditRecord], day: int) -> int:
    """Number of audit records stamped with ``day``. The chain must verify."""
    return throughput_series(chain, [day])[day]


# ---------------------------------------------------------------------------
# logs


HOSPITAL_FIELDS = (
    "day", "hospital", "drug", "buffer", "post_delivery", "demand", "served_on_time",
    "consumption", "backlog", "end_inventory", "ordered", "shipped",
)
ALLOCATION_FIELDS = ("day", "region", "drug", "quantity", "fairness", "weight")
EVENT_FIELDS = ("day", "kind", "agent", "detail")


@dataclass(frozen=True)
class HospitalDay:
    day: int
    hospital: str
    drug: int
    buffer: int
    post_delivery: int
    demand: int
    served_on_time: int
    consumption: int
    backlog: int
    end_inventory: int
    ordered: int
    shipped: int


@dataclass(frozen=True)
class AllocationRow:
    day: int
    region: int
    drug: int
    quantity: int
    fairness: float
    weight: float  # active cases x drug criticality


@dataclass(frozen=True)
class Event:
    day: int
    kind: str
    agent: str
    detail: str = ""


@dataclass
class RunLogs:
    horizon: int
    hospital_days: list[HospitalDay]
    allocations: list[AllocationRow]
    chain: list[AuditRecord]
    events: list[Event] = field(default_factory=list)
    store: ContentStore | None = None
    theta_frac: float = DEFAULT_THETA_FRAC


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def hospital_csv(rows: Sequence[HospitalDay]) -> str:
    return _csv_text(HOSPITAL_FIELDS, ([getattr(r, f) for f in HOSPITAL_FIELDS] for r in rows))


def allocations_csv(rows: Sequence[AllocationRow]) -> str:
    return _csv_text(ALLOCATION_FIELDS, ([getattr(r, f) for f in ALLOCATION_FIELDS] for r in rows))


def events_csv(rows: Sequence[Event]) -> str:
    return _csv_text(EVENT_FIELDS, ([r.day, r.kind, r.agent, r.detail] for r in rows))


def _read(path: Path, header: Sequence[str]) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if not rows or tuple(rows[0]) != tuple(header):
        raise MetricsError(f"{path.name}: unexpected header")
    return rows[1:]


def load_run_logs(run_dir: str | Path) -> RunLogs:
    """Rebuild :class:`RunLogs` from a run directory's exported files."""
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    hospital_days = [
        HospitalDay(int(r[0]), r[1], *map(int, r[2:]))
        for r in _read(run_dir / "hospital_daily.csv", HOSPITAL_FIELDS)
    ]
    allocations = [
        AllocationRow(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), float(r[5]))
        for r in _read(run_dir / "allocations.csv", ALLOCATION_FIELDS)
    ]
    events = [Event(int(r[0]), r[1], r[2], r[3]) for r in _read(run_dir / "events.csv", EVENT_FIELDS)]
    chain, verdict = parse_chain((run_dir / "audit_chain.jsonl").read_bytes())
    if not verdict:
        raise MetricsError(f"audit chain unreadable at record {verdict.index}: {verdict.reason}")
    return RunLogs(int(config["horizon_days"]), hospital_days, allocations, chain, events, ContentStore(run_dir / "store"))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    service_level: float
    unfulfilled_pct: float
    recovery: dict[str, list[tuple[int, int, float]]]  # hospital -> (drug, start_day, tau)
    stockout_days: dict[str, int]
    fairness: dict[int, list[float] | None]  # day -> delta per region
    fairness_by_drug: dict[int, dict[int, list[float] | None]]
    efficiency: dict[int, float | None]
    throughput: dict[int, int]
    audit_pass_rate: float
    fallbacks: int
    clamps: int
    rejections: int
    total_demand: int
    total_served: int

    @property
    def mean_fairness_deviation(self) -> float | None:
        vals = [d for row in self.fairness.values() if row is not None for d in row]
        return math.fsum(vals) / len(vals) if vals else None

    @property
    def undefined_fairness_days(self) -> int:
        return sum(1 for row in self.fairness.values() if row is None)

    @property
    def mean_efficiency(self) -> float | None:
        vals = [v for v in self.efficiency.values() if v is not None]
        return math.fsum(vals) / len(vals) if vals else None

    def taus(self, recovered_only: bool = True) -> list[float]:
        out = [tau for eps in self.recovery.values() for _, _, tau in eps]
        return [t for t in out if math.isfinite(t)] if recovered_only else out

    @property
    def mean_tau(self) -> float | None:
        vals = self.taus()
        return math.fsum(vals) / len(vals) if vals else None

    def to_json(self) -> dict:
        def tau_out(t):
            return t if math.isfinite(t) else None

        return {
            "schema_version": SCHEMA_VERSION,
            "service_level": self.service_level,
            "unfulfilled_pct": self.unfulfilled_pct,
            "total_demand": self.total_demand,
            "total_served_on_time": self.total_served,
            "recovery": {
                h: [{"drug": d, "start_day": s, "tau": tau_out(t), "recovered": math.isfinite(t)} for d, s, t in eps]
                for h, eps in sorted(self.recovery.items())
            },
            "mean_tau": self.mean_tau,
            "stockout_days": dict(sorted(self.stockout_days.items())),
            "fairness": {
                "mean_delta": self.mean_fairness_deviation,
                "undefined_days": self.undefined_fairness_days,
                "per_day": {str(t): row for t, row in sorted(self.fairness.items())},
                "per_drug": {
                    str(d): {str(t): row for t, row in sorted(days.items())}
                    for d, days in sorted(self.fairness_by_drug.items())
                },
            },
            "fulfillment_efficiency": {
                "mean": self.mean_efficiency,
                "per_day": {str(t): v for t, v in sorted(self.efficiency.items())},
            },
            "throughput": {
                "total": sum(self.throughput.values()),
                "per_day": {str(t): v for t, v in sorted(self.throughput.items())},
            },
            "audit_pass_rate": self.audit_pass_rate,
            "fallbacks": self.fallbacks,
            "clamps": self.clamps,
            "snapshot_rejections": self.rejections,
        }

    def to_csv(self) -> str:
        rows = []
        for t in sorted(self.throughput):
            delta = self.fairness.get(t)
            eta = self.efficiency.get(t)
            rows.append((
                t,
                "" if eta is None else eta,
                self.throughput[t],
                "" if delta is None else math.fsum(delta) / len(delta) if delta else 0.0,
                "" if delta is None else max(delta, default=0.0),
            ))
        return _csv_text(("day", "eta", "throughput", "mean_delta", "max_delta"), rows)


def _snapshot_days(chain: Sequence[AuditRecord]) -> dict[int, int]:
    return {rec.timestamp: rec.tx_id for rec in chain if rec.action == "snapshot_commit"}


def service_summary(logs: RunLogs) -> MetricsReport:
    days = list(range(1, logs.horizon + 1))
    committed = _snapshot_days(logs.chain)
    missing = [t for t in days if t not in committed]
    if missing:
        raise MetricsError(f"no committed snapshot for day(s) {missing[:5]}")
    seen = {r.day for r in logs.hospital_days}
    if seen != set(days):
        raise MetricsError("hospital log does not cover every day of the horizon")
    tp = throughput_series(logs.chain, [0, *days])  # day 0 holds registration and opening stock
    # a day passes the audit check if its snapshot payload is present and intact
    if logs.store is not None:
        ok = sum(1 for t in days if verify_payloads([logs.chain[committed[t]]], logs.store))
        pass_rate = ok / len(days)
    else:
        pass_rate = 1.0

    series: dict[tuple[str, int], list[tuple[int, int]]] = defaultdict(list)
    buffers: dict[tuple[str, int], int] = {}
    demand = served = 0
    ordered: dict[int, list[int]] = defaultdict(list)
    shipped: dict[int, list[int]] = defaultdict(list)
    for row in sorted(logs.hospital_days, key=lambda r: (r.hospital, r.drug, r.day)):
        series[(row.hospital, row.drug)].append((row.day, row.post_delivery))
        buffers[(row.hospital, row.drug)] = row.buffer
        demand += row.demand
        served += row.served_on_time
        ordered[row.day].append(row.ordered)
        shipped[row.day].append(row.shipped)

    recovery: dict[str, list[tuple[int, int, float]]] = defaultdict(list)
    low_days: dict[str, set[int]] = defaultdict(set)
    for (h, d), pts in sorted(series.items()):
        b = buffers[(h, d)]
        theta = logs.theta_frac * b
        values = [v for _, v in pts]
        recovery.setdefault(h, [])
        if b <= 0:
            continue
        for ep in resilience(values, theta, b, first_day=pts[0][0]):
            recovery[h].append((d, ep.start_day, ep.tau))
        low_days[h].update(t for t, v in pts if v < theta)

    by_day: dict[int, dict[int, list[float]]] = defaultdict(lambda: defaultdict(lambda: [0.0, 0.0]))
    by_drug: dict[int, dict[int, dict[int, list[float]]]] = defaultdict(lambda: defaultdict(dict))
    for a in logs.allocations:
        cell = by_day[a.day][a.region]
        cell[0] += a.quantity
        cell[1] += a.weight
        by_drug[a.drug][a.day][a.region] = [a.quantity, a.weight]
    fairness = {}
    for t in days:
        regions = sorted(by_day.get(t, {}))
        fairness[t] = fairness_deviation([by_day[t][r][0] for r in regions], [by_day[t][r][1] for r in regions])
    fairness_by_drug = {
        d: {t: fairness_deviation([cells[r][0] for r in sorted(cells)], [cells[r][1] for r in sorted(cells)])
            for t, cells in sorted(per_day.items())}
        for d, per_day in sorted(by_drug.items())
    }
    efficiency = {t: fulfillment_efficiency(shipped[t], ordered[t]) for t in days}

    level = 100.0 if demand == 0 else 100.0 * served / demand
    kinds = Counter(e.kind for e in logs.events)
    return MetricsReport(
        service_level=level,
        unfulfilled_pct=100.0 - level,
        recovery=dict(recovery),
        stockout_days={h: len(v) for h, v in low_days.items()} | {h: 0 for h in recovery if h not in low_days},
        fairness=fairness,
        fairness_by_drug=fairness_by_drug,
        efficiency=efficiency,
        throughput=tp,
        audit_pass_rate=pass_rate,
        fallbacks=kinds["fallback"],
        clamps=kinds["clamp"],
        rejections=kinds["snapshot_reject"],
        total_demand=demand,
        total_served=served,
    )


def write_reports(report: MetricsReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out_dir / "metrics.csv").write_text(report.to_csv())


def summarize_sweep(reports: Mapping[str, MetricsReport]) -> str:
    rows = [
        (name, r.service_level, r.unfulfilled_pct, "" if r.mean_tau is None else r.mean_tau,
         "" if r.mean_fairness_deviation is None else r.mean_fairness_deviation)
        for name, r in reports.items()
    ]
    return _csv_text(("run", "service_level", "unfulfilled_pct", "mean_tau", "mean_delta"), rows)
