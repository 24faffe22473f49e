"""Agent classes and their deterministic, stateless reasoning tools.

Hospitals order up to a buffer target, distributors ration their stock by
criticality, and the manufacturer splits supply across regions with an
exponential (softmax) priority on epidemic severity plus a minimum-support
floor. Every function in this module is pure.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .messages import OrderMsg, message_from_dict, message_to_dict
from .rounding import exact_fraction, floor_share, largest_remainder
from .scenario import Timeline, sample_disruption

ROLES = ("manufacturer", "distributor", "hospital")


@dataclass(frozen=True, order=True)
class AgentId:
    role: str
    index: int
    region: int | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.index < 0:
            raise ValueError("agent index must be >= 0")

    def __str__(self) -> str:
        return f"{self.role}-{self.index}"


@dataclass(frozen=True)
class HospitalState:
    buffer_target: tuple[int, ...]
    inventory: tuple[int, ...]
    pipeline: tuple[int, ...]
    criticality_weight: tuple[float, ...]
    backlog: tuple[int, ...]


@dataclass(frozen=True)
class DistributorState:
    inventory: tuple[int, ...]
    pipeline: tuple[int, ...]
    disrupted: bool = False


@dataclass(frozen=True)
class ManufacturerState:
    available: tuple[int, ...]
    daily_capacity: tuple[int, ...]
    disrupted: bool = False


@dataclass(frozen=True)
class Observation:
    """One agent's local view on one day. Fields that do not apply to a role stay empty."""

    day: int
    agent_id: str
    role: str
    inventory: tuple[int, ...]
    pipeline: tuple[int, ...] = ()
    buffer: tuple[int, ...] = ()
    backlog: tuple[int, ...] = ()
    criticality_weights: tuple[float, ...] = ()
    forecast: tuple[tuple[float, ...], ...] = ()
    disrupted: bool = False
    severity: tuple[float, ...] = ()
    infected: tuple[float, ...] = ()
    population: tuple[int, ...] = ()
    capacity: tuple[int, ...] = ()
    alpha: float = 0.0
    epsilon: float = 0.0
    messages: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["messages"] = [message_to_dict(m) for m in self.messages]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        kw = dict(d)
        for key in ("inventory", "pipeline", "buffer", "backlog", "criticality_weights",
                    "severity", "infected", "population", "capacity"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "forecast" in kw:
            kw["forecast"] = tuple(tuple(row) for row in kw["forecast"])
        kw["messages"] = tuple(message_from_dict(m) for m in kw.get("messages", ()))
        return cls(**kw)


@dataclass(frozen=True)
class HospitalDecision:
    orders: tuple[int, ...]
    criticality: tuple[float, ...]
    forecast: tuple[int, ...]


@dataclass(frozen=True)
class DistributorDecision:
    shipments: dict[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class ManufacturerDecision:
    allocations: dict[int, tuple[int, ...]] = field(default_factory=dict)
    fairness: tuple[float, ...] = ()


# ---------------------------------------------------------------------------
# tools


def tool_order_estimator(buffer_target: int, inventory: int, pipeline: int) -> int:
    """Order-up-to rule: max(0, B - (I + P))."""
    if min(buffer_target, inventory, pipeline) < 0:
        raise ValueError("order estimator inputs must be >= 0")
    return max(0, int(buffer_target) - (int(inventory) + int(pipeline)))


def fairness_weights(severity: Sequence[float], alpha: float) -> list[float]:
    """Softmax of alpha * severity, max-shifted so large scores cannot overflow."""
    s = [float(x) for x in severity]
    if not all(math.isfinite(x) for x in s):
        raise ValueError(f"severity must be finite: {severity!r}")
    if not (math.isfinite(alpha) and alpha >= 0):
        raise ValueError("alpha must be finite and >= 0")
    if not s:
        return []
    top = max(s)
    e = [math.exp(alpha * (x - top)) for x in s]
    total = math.fsum(e)
    return [x / total for x in e]


def tool_allocation_engine(severity: Sequence[float], alpha: float, available: int) -> list[int]:
    """Integer split of ``available`` by softmax weights; sums to ``available`` exactly."""
    if available < 0:
        raise ValueError("available must be >= 0")
    return largest_remainder(fairness_weights(severity, alpha), int(available))


def tool_fairness_floor(allocation: Sequence[int], epsilon: float, available: int) -> list[int]:
    """Raise every region to floor(epsilon * available), funding it from above-floor regions.

    Reductions are proportional to each donor's surplus over the floor.
    """
    x = [int(v) for v in allocation]
    if exact_fraction(epsilon) * len(x) > 1:
        raise ValueError(f"infeasible minimum support: epsilon={epsilon} with {len(x)} regions")
    if sum(x) != available:
        raise ValueError("allocation must sum to the available quantity")
    floor = floor_share(epsilon, available)
    need = sum(floor - v for v in x if v < floor)
    if need == 0:
        return x
    donors = [i for i, v in enumerate(x) if v > floor]
    cuts = largest_remainder([x[i] - floor for i in donors], need)
    out = [max(v, floor) for v in x]
    for i, c in zip(donors, cuts):
        out[i] -= c
    return out


def tool_criticality(buffer_target: int, inventory: int, pipeline: int, criticality_weight: float) -> float:
    """Criticality-weighted shortfall fraction, c * max(0, B - (I + P)) / max(B, 1)."""
    if min(buffer_target, inventory, pipeline) < 0:
        raise ValueError("criticality inputs must be >= 0")
    if not 0 <= criticality_weight <= 1:
        raise ValueError("criticality weight must lie in [0, 1]")
    gap = max(0, buffer_target - (inventory + pipeline))
    return criticality_weight * gap / max(buffer_target, 1)


def tool_epidemic_predictor(timeline: Timeline, region: int, day: int, horizon: int) -> np.ndarray:
    """Noiseless projected demand (I * c) for days ``day .. day + horizon - 1``, shape (horizon, drugs)."""
    T = timeline.config.horizon_days
    if horizon < 0 or not 1 <= day <= T or day + horizon - 1 > T:
        raise ValueError(f"forecast window day={day} horizon={horizon} outside 1..{T}")
    return timeline.projected[day - 1 : day - 1 + horizon, region, :].copy()


def tool_disruption_simulator(p: float, rng: np.random.Generator) -> bool:
    return sample_disruption(p, rng)


# ---------------------------------------------------------------------------
# role policies


def hospital_decide(obs: Observation) -> HospitalDecision:
    """Order the buffer gap per drug; backlog raises the effective target."""
    orders = []
    crit = []
    for d, inv in enumerate(obs.inventory):
        target = obs.buffer[d] + (obs.backlog[d] if obs.backlog else 0)
        orders.append(tool_order_estimator(target, inv, obs.pipeline[d]))
        crit.append(tool_criticality(obs.buffer[d], inv, obs.pipeline[d], obs.criticality_weights[d]))
    if obs.forecast:
        forecast = tuple(int(math.floor(v + 0.5)) for v in obs.forecast[0])
    else:
        forecast = (0,) * len(obs.inventory)
    return HospitalDecision(tuple(orders), tuple(crit), forecast)


def cap_and_redistribute(
    allocation: Sequence[int],
    caps: Sequence[int],
    weights: Sequence[float],
) -> list[int]:
    """Clip entries to their caps and hand the freed units to uncapped entries by ``weights``.

    Repeats until nothing exceeds its cap or no entry can absorb more; units that
    cannot be placed are left unallocated. Ties favour the entry currently holding less.
    """
    x = [int(v) for v in allocation]
    budget = sum(x)
    while True:
        over = [i for i, v in enumerate(x) if v > caps[i]]
        if not over:
            return x
        for i in over:
            x[i] = int(caps[i])
        surplus = budget - sum(x)
        open_ = [i for i, v in enumerate(x) if v < caps[i]]
        if not open_ or surplus <= 0:
            return x
        w = [weights[i] for i in open_]
        if math.fsum(w) <= 0:
            w = [1.0] * len(open_)
        add = largest_remainder(w, surplus, prefer=[x[i] for i in open_])
        for i, a in zip(open_, add):
            x[i] += a


def distributor_decide(obs: Observation, orders: Sequence[OrderMsg]) -> DistributorDecision:
    """Fill orders in full when stock allows, else ration by order x (1 + criticality)."""
    ndrugs = len(obs.inventory)
    ships: dict[str, list[int]] = {o.hospital: [0] * ndrugs for o in orders}
    for d in range(ndrugs):
        req = [int(o.quantity[d]) for o in orders]
        stock = int(obs.inventory[d])
        if sum(req) <= stock:
            y = req
        else:
            w = [r * (1.0 + float(o.criticality[d])) for r, o in zip(req, orders)]
            y = cap_and_redistribute(largest_remainder(w, stock), req, w)
        for o, q in zip(orders, y):
            ships[o.hospital][d] = q
    return DistributorDecision({k: tuple(v) for k, v in ships.items()})


def manufacturer_decide(obs: Observation, regional_demand: Mapping[int, Sequence[int]]) -> ManufacturerDecision:
    """Softmax priority on infected fraction, minimum-support floor, then cap at regional demand.

    A disrupted manufacturer allocates nothing; undelivered stock stays on hand.
    """
    regions = sorted(regional_demand)
    severity = [obs.severity[r] for r in regions]
    phi = fairness_weights(severity, obs.alpha)
    ndrugs = len(obs.inventory)
    alloc = {r: [0] * ndrugs for r in regions}
    if not obs.disrupted and regions:
        for d in range(ndrugs):
            q = int(obs.inventory[d])
            x = tool_fairness_floor(tool_allocation_engine(severity, obs.alpha, q), obs.epsilon, q)
            caps = [int(regional_demand[r][d]) for r in regions]
            x = cap_and_redistribute(x, caps, phi)
            for r, v in zip(regions, x):
                alloc[r][d] = v
    fairness = [0.0] * (max(regions) + 1 if regions else 0)
    for r, f in zip(regions, phi):
        fairness[r] = f
    return ManufacturerDecision({r: tuple(v) for r, v in alloc.items()}, tuple(fairness))
