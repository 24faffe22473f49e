"""Typed payloads of the daily single-pass protocol (hospital -> distributor -> manufacturer and back)."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class OrderMsg:
    hospital: str
    distributor: str
    quantity: tuple[int, ...]
    forecast: tuple[int, ...]
    criticality: tuple[float, ...]


@dataclass(frozen=True)
class AggregateDemandMsg:
    region: int
    distributor: str
    manufacturer: str
    total: tuple[int, ...]
    disrupted: bool


@dataclass(frozen=True)
class AllocationMsg:
    region: int
    manufacturer: str
    distributor: str
    quantity: tuple[int, ...]
    fairness: float


@dataclass(frozen=True)
class FulfillmentMsg:
    hospital: str
    distributor: str
    quantity: tuple[int, ...]
    delay_flag: bool


MESSAGE_TYPES = {
    "order": OrderMsg,
    "aggregate_demand": AggregateDemandMsg,
    "allocation": AllocationMsg,
    "fulfillment": FulfillmentMsg,
}
_TYPE_NAMES = {cls: name for name, cls in MESSAGE_TYPES.items()}


def message_to_dict(msg) -> dict:
    d = asdict(msg)
    d["type"] = _TYPE_NAMES[type(msg)]
    return d


def message_from_dict(d: dict):
    d = dict(d)
    cls = MESSAGE_TYPES[d.pop("type")]
    for key in ("quantity", "forecast", "criticality", "total"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)
