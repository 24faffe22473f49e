"""Run agent decisions in an external process over a JSON-lines channel.

Each decision is one request line on the child's stdin and one response line
on its stdout. Anything other than a timely, well-formed, matching response
falls back to the built-in decision for that agent and is logged. Every
decision, external or fallback, then passes through :func:`sanitize_decision`
so that feasibility never depends on the external process.
"""

from __future__ import annotations

import json
import math
import os
import selectors
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .agents import (
    DistributorDecision,
    HospitalDecision,
    ManufacturerDecision,
    Observation,
    distributor_decide,
    fairness_weights,
    hospital_decide,
    manufacturer_decide,
    tool_criticality,
)
from .messages import OrderMsg, message_from_dict, message_to_dict
from .metrics import Event
from .rounding import largest_remainder

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_MS = 5000
MAX_QUANTITY = 10**12
MAX_LINE_BYTES = 1 << 20


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# wire format


def encode_request(obs: Observation, deadline_ms: int, *, orders=None, regional_demand=None) -> bytes:
    req: dict[str, Any] = {
        "protocol_version": PROTOCOL_VERSION,
        "day": obs.day,
        "agent_id": obs.agent_id,
        "role": obs.role,
        "deadline_ms": int(deadline_ms),
        "observation": obs.to_dict(),
    }
    if orders is not None:
        req["orders"] = [message_to_dict(o) for o in orders]
    if regional_demand is not None:
        req["regional_demand"] = {str(r): list(v) for r, v in sorted(regional_demand.items())}
    return json.dumps(req, sort_keys=True, separators=(",", ":"), allow_nan=False).encode() + b"\n"


@dataclass(frozen=True)
class PolicyRequest:
    protocol_version: int
    day: int
    agent_id: str
    role: str
    deadline_ms: int
    observation: Observation
    orders: tuple[OrderMsg, ...] = ()
    regional_demand: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def from_line(cls, line: bytes | str) -> "PolicyRequest":
        d = json.loads(line)
        if d.get("protocol_version") != PROTOCOL_VERSION:
            raise SchemaError(f"unsupported protocol version {d.get('protocol_version')!r}")
        return cls(
            d["protocol_version"], d["day"], d["agent_id"], d["role"], d["deadline_ms"],
            Observation.from_dict(d["observation"]),
            tuple(message_from_dict(o) for o in d.get("orders", ())),
            {int(r): tuple(v) for r, v in d.get("regional_demand", {}).items()},
        )


@dataclass(frozen=True)
class PolicyResponse:
    agent_id: str
    day: int
    decision: dict


def encode_response(agent_id: str, day: int, decision) -> bytes:
    if isinstance(decision, HospitalDecision):
        body = {"orders": list(decision.orders), "criticality": list(decision.criticality), "forecast": list(decision.forecast)}
    elif isinstance(decision, DistributorDecision):
        body = {"shipments": {h: list(v) for h, v in sorted(decision.shipments.items())}}
    elif isinstance(decision, ManufacturerDecision):
        body = {"allocations": {str(r): list(v) for r, v in sorted(decision.allocations.items())}}
    else:
        raise TypeError(f"not a decision: {decision!r}")
    return json.dumps({"agent_id": agent_id, "day": day, "decision": body}, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def _qty_vec(v, n: int, where: str) -> tuple[int, ...]:
    if not isinstance(v, list) or len(v) != n:
        raise SchemaError(f"{where}: expected a list of {n} integers")
    for q in v:
        if isinstance(q, bool) or not isinstance(q, int):
            raise SchemaError(f"{where}: non-integer quantity {q!r}")
        if q < 0:
            raise SchemaError(f"{where}: negative quantity {q}")
        if q > MAX_QUANTITY:
            raise SchemaError(f"{where}: quantity {q} out of range")
    return tuple(v)


def parse_response(line: bytes, obs: Observation, *, orders=None, regional_demand=None):
    """Decode one response line into a role decision, or raise :class:`SchemaError`."""
    try:
        d = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise SchemaError(f"unparseable response: {type(exc).__name__}") from None
    if not isinstance(d, dict) or set(d) != {"agent_id", "day", "decision"} or not isinstance(d["decision"], dict):
        raise SchemaError("response must be an object with agent_id, day and decision")
    body = d["decision"]
    n = len(obs.inventory)
    if obs.role == "hospital":
        if not {"orders"} <= set(body) <= {"orders", "criticality", "forecast"}:
            raise SchemaError("hospital decision needs orders")
        qty = _qty_vec(body["orders"], n, "orders")
        if "criticality" in body:
            crit = body["criticality"]
            if not isinstance(crit, list) or len(crit) != n or any(
                isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c) for c in crit
            ):
                raise SchemaError("criticality must be finite numbers, one per drug")
            crit = tuple(float(c) for c in crit)
        else:
            crit = tuple(
                tool_criticality(obs.buffer[k], obs.inventory[k], obs.pipeline[k], obs.criticality_weights[k])
                for k in range(n)
            )
        builtin = hospital_decide(obs)
        forecast = _qty_vec(body["forecast"], n, "forecast") if "forecast" in body else builtin.forecast
        return HospitalDecision(qty, crit, forecast)
    if obs.role == "distributor":
        if set(body) != {"shipments"} or not isinstance(body["shipments"], dict):
            raise SchemaError("distributor decision needs shipments")
        known = {o.hospital for o in orders or ()}
        ships = {}
        for h, v in body["shipments"].items():
            if h not in known:
                raise SchemaError(f"shipment to unknown hospital {h!r}")
            ships[h] = _qty_vec(v, n, f"shipments[{h}]")
        return DistributorDecision(ships)
    if obs.role == "manufacturer":
        if set(body) != {"allocations"} or not isinstance(body["allocations"], dict):
            raise SchemaError("manufacturer decision needs allocations")
        regions = set(regional_demand or {})
        alloc = {}
        for r, v in body["allocations"].items():
            if not isinstance(r, str) or not r.isdigit() or int(r) not in regions:
                raise SchemaError(f"allocation to unknown region {r!r}")
            alloc[int(r)] = _qty_vec(v, n, f"allocations[{r}]")
        phi = _fairness(obs, regional_demand)
        return ManufacturerDecision(alloc, phi)
    raise SchemaError(f"unknown role {obs.role!r}")


def _fairness(obs: Observation, regional_demand) -> tuple[float, ...]:
    regions = sorted(regional_demand or {})
    phi = fairness_weights([obs.severity[r] for r in regions], obs.alpha)
    out = [0.0] * (max(regions) + 1 if regions else 0)
    for r, f in zip(regions, phi):
        out[r] = f
    return tuple(out)


# ---------------------------------------------------------------------------
# sanitization


def _shrink(values: list[int], limit: int) -> list[int]:
    """Scale non-negative integers down to sum to ``limit``, largest remainder; never raises an entry."""
    if sum(values) <= limit:
        return values
    return largest_remainder(values, limit)


def sanitize_decision(
    decision,
    obs: Observation,
    *,
    orders: Sequence[OrderMsg] | None = None,
    regional_demand: Mapping[int, Sequence[int]] | None = None,
) -> tuple[Any, list[str]]:
    """Clamp a decision into the feasible set and list every adjustment made.

    hospital: orders >= 0, criticality into [0, 1].
    distributor: shipments >= 0 and <= the hospital's order, one entry per order,
    per-drug total <= on-hand stock.
    manufacturer: allocations >= 0, one entry per region, per-drug total <= stock,
    nothing while halted. Fairness weights are always recomputed from severity.
    """
    clamps: list[str] = []
    n = len(obs.inventory)
    if isinstance(decision, HospitalDecision):
        qty = []
        for k, q in enumerate(decision.orders):
            if q < 0:
                clamps.append(f"order[{k}] {q} -> 0")
            qty.append(max(0, int(q)))
        crit = []
        for k, c in enumerate(decision.criticality):
            v = min(1.0, max(0.0, c)) if math.isfinite(c) else 0.0
            if v != c:
                clamps.append(f"criticality[{k}] {c} -> {v}")
            crit.append(v)
        return HospitalDecision(tuple(qty), tuple(crit), tuple(decision.forecast)), clamps

    if isinstance(decision, DistributorDecision):
        orders = list(orders or ())
        for h in sorted(set(decision.shipments) - {o.hospital for o in orders}):
            clamps.append(f"dropped shipment to unknown {h}")
        ships = {}
        for o in orders:
            y = list(decision.shipments.get(o.hospital, (0,) * n))
            for k in range(n):
                v = min(max(0, int(y[k])), int(o.quantity[k]))
                if v != y[k]:
                    clamps.append(f"{o.hospital}[{k}] {y[k]} -> {v}")
                y[k] = v
            ships[o.hospital] = y
        for k in range(n):
            col = [ships[o.hospital][k] for o in orders]
            fit = _shrink(col, int(obs.inventory[k]))
            if fit != col:
                clamps.append(f"drug {k}: shipments {sum(col)} -> stock {obs.inventory[k]}")
                for o, v in zip(orders, fit):
                    ships[o.hospital][k] = v
        return DistributorDecision({h: tuple(v) for h, v in ships.items()}), clamps

    if isinstance(decision, ManufacturerDecision):
        regions = sorted(regional_demand or {})
        for r in sorted(set(decision.allocations) - set(regions)):
            clamps.append(f"dropped allocation to unknown region {r}")
        alloc = {}
        for r in regions:
            x = list(decision.allocations.get(r, (0,) * n))
            for k in range(n):
                v = max(0, int(x[k]))
                if obs.disrupted:
                    v = 0
                if v != x[k]:
                    clamps.append(f"region {r}[{k}] {x[k]} -> {v}")
                x[k] = v
            alloc[r] = x
        for k in range(n):
            col = [alloc[r][k] for r in regions]
            fit = _shrink(col, int(obs.inventory[k]))
            if fit != col:
                clamps.append(f"drug {k}: allocations {sum(col)} -> stock {obs.inventory[k]}")
                for r, v in zip(regions, fit):
                    alloc[r][k] = v
        phi = _fairness(obs, regional_demand)
        return ManufacturerDecision({r: tuple(v) for r, v in alloc.items()}, phi), clamps

    raise TypeError(f"not a decision: {decision!r}")


# ---------------------------------------------------------------------------
# channel


class Channel:
    """A child process spoken to in lines. Reads are bounded by a deadline."""

    def __init__(self, command: str | Sequence[str]) -> None:
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ValueError("empty policy command")
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, bufsize=0
        )
        os.set_blocking(self.proc.stdout.fileno(), False)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = b""
        self.closed = False

    def send(self, line: bytes) -> None:
        if self.closed:
            raise EOFError("channel closed")
        try:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.closed = True
            raise EOFError(f"write failed: {exc}") from None

    def readline(self, deadline: float) -> bytes:
        """Next complete line, or TimeoutError / EOFError / SchemaError (oversize)."""
        while b"\n" not in self._buf:
            if self.closed:
                raise EOFError("channel closed")
            left = deadline - time.monotonic()
            if left <= 0:
                raise TimeoutError
            if not self._sel.select(left):
                continue
            try:
                chunk = self.proc.stdout.read(65536)
            except BlockingIOError:
                continue
            if not chunk:
                self.closed = True
                raise EOFError("policy process closed its output")
            self._buf += chunk
            if len(self._buf) > MAX_LINE_BYTES and b"\n" not in self._buf:
                self._buf = b""
                raise SchemaError("response line exceeds size limit")
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        self.closed = True
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=1)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        self._sel.close()
        self.proc.stdout.close()


class ExternalPolicy:
    """A :class:`~medsupply.coordination.Policy` backed by an external process.

    ``events`` accumulates fallback and clamp records for the run log.
    """

    def __init__(self, command: str | Sequence[str], timeout_ms: int = DEFAULT_TIMEOUT_MS) -> None:
        if timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        self.name = f"external:{command if isinstance(command, str) else shlex.join(command)}"
        self.timeout_ms = timeout_ms
        self.channel = Channel(command)
        self.events: list[Event] = []
        self.fallbacks = 0
        self.clamps = 0

    def close(self) -> None:
        self.channel.close()

    def __enter__(self) -> "ExternalPolicy":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def drain_events(self) -> list[Event]:
        out, self.events = self.events, []
        return out

    def _ask(self, obs: Observation, builtin, **ctx):
        decision, reason = None, ""
        try:
            self.channel.send(encode_request(obs, self.timeout_ms, **ctx))
            deadline = time.monotonic() + self.timeout_ms / 1000.0
            while decision is None:
                line = self.channel.readline(deadline)
                try:
                    head = json.loads(line)
                    stale = isinstance(head, dict) and (head.get("agent_id"), head.get("day")) != (obs.agent_id, obs.day)
                except (ValueError, RecursionError):
                    stale = False
                if stale:
                    self.events.append(Event(obs.day, "stale_response", obs.agent_id, "skipped"))
                    continue
                decision = parse_response(line, obs, **ctx)
        except TimeoutError:
            reason = "timeout"
        except EOFError as exc:
            reason = f"eof: {exc}"
        except SchemaError as exc:
            reason = f"schema: {exc}"
        if decision is None:
            self.fallbacks += 1
            self.events.append(Event(obs.day, "fallback", obs.agent_id, reason))
            decision = builtin()
        clean, clamps = sanitize_decision(decision, obs, **ctx)
        for c in clamps:
            self.clamps += 1
            self.events.append(Event(obs.day, "clamp", obs.agent_id, c))
        return clean

    def hospital(self, obs: Observation) -> HospitalDecision:
        return self._ask(obs, lambda: hospital_decide(obs))

    def distributor(self, obs: Observation, orders: Sequence[OrderMsg]) -> DistributorDecision:
        return self._ask(obs, lambda: distributor_decide(obs, orders), orders=list(orders))

    def manufacturer(self, obs: Observation, regional_demand: Mapping[int, Sequence[int]]) -> ManufacturerDecision:
        return self._ask(obs, lambda: manufacturer_decide(obs, regional_demand), regional_demand=dict(regional_demand))


def external_decide(request: PolicyRequest, policy: ExternalPolicy):
    """Single decision through an open adapter, with fallback and sanitization."""
    obs = request.observation
    if request.role == "hospital":
        return policy.hospital(obs)
    if request.role == "distributor":
        return policy.distributor(obs, request.orders)
    if request.role == "manufacturer":
        return policy.manufacturer(obs, request.regional_demand)
    raise SchemaError(f"unknown role {request.role!r}")


def parse_policy_spec(spec: str):
    """``builtin`` or ``external:<command>``."""
    if spec == "builtin":
        return None
    if spec.startswith("external:") and spec[len("external:"):].strip():
        return spec[len("external:"):].strip()
    raise ValueError(f"policy must be 'builtin' or 'external:<command>', got {spec!r}")
