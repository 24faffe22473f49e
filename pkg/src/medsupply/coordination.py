"""Daily single-pass coordination over the supply-chain DAG.

Phase order inside one day is fixed: deliver due shipments, hospitals consume,
hospitals order, distributors aggregate, manufacturer produces and allocates,
distributors sub-allocate, shipments are scheduled. :func:`run_round` computes
the day's movements without touching the input state; :func:`apply_outcome`
installs them and enforces goods conservation.
"""

from __future__ import annotations

import dataclasses
import graphlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .agents import (
    AgentId,
    DistributorDecision,
    DistributorState,
    HospitalDecision,
    HospitalState,
    ManufacturerDecision,
    ManufacturerState,
    Observation,
    distributor_decide,
    hospital_decide,
    manufacturer_decide,
    tool_epidemic_predictor,
)
from .messages import AggregateDemandMsg, AllocationMsg, FulfillmentMsg, OrderMsg
from .scenario import ScenarioConfig, Timeline, disruption_draw

FORECAST_WINDOW = 3


class TopologyError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    """An internal consistency check failed; ``invariant`` names it."""

    def __init__(self, invariant: str, detail: str) -> None:
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


class RoundAbort(RuntimeError):
    """A policy failed while deciding; carries the day and agent."""


@dataclass(frozen=True)
class Topology:
    nodes: dict[str, AgentId]
    edges: tuple[tuple[str, str], ...]
    lead_time: int = 1

    def validate(self) -> None:
        graph: dict[str, set[str]] = {n: set() for n in self.nodes}
        for src, dst in self.edges:
            if src not in self.nodes or dst not in self.nodes:
                raise TopologyError(f"edge {src}->{dst} references an unknown node")
            graph[dst].add(src)
        try:
            tuple(graphlib.TopologicalSorter(graph).static_order())
        except graphlib.CycleError as exc:
            raise TopologyError(f"topology contains a cycle: {exc.args[1]}") from None
        allowed = {("hospital", "distributor"), ("distributor", "manufacturer")}
        out_degree = Counter(src for src, _ in self.edges)
        for src, dst in self.edges:
            pair = (self.nodes[src].role, self.nodes[dst].role)
            if pair not in allowed:
                raise TopologyError(f"edge {src}->{dst} links {pair[0]} to {pair[1]}")
        for name, node in self.nodes.items():
            want = 0 if node.role == "manufacturer" else 1
            if out_degree[name] != want:
                raise TopologyError(f"{name} must have exactly {want} upstream link(s), has {out_degree[name]}")
        if self.lead_time < 0:
            raise TopologyError("lead time must be >= 0")

    def of_role(self, role: str) -> list[str]:
        return sorted((n for n, a in self.nodes.items() if a.role == role), key=lambda n: self.nodes[n].index)

    @property
    def manufacturers(self) -> list[str]:
        return self.of_role("manufacturer")

    @property
    def distributors(self) -> list[str]:
        return self.of_role("distributor")

    @property
    def hospitals(self) -> list[str]:
        return self.of_role("hospital")

    def upstream(self, node: str) -> str:
        for src, dst in self.edges:
            if src == node:
                return dst
        raise KeyError(node)

    def downstream(self, node: str) -> list[str]:
        return sorted((src for src, dst in self.edges if dst == node), key=lambda n: self.nodes[n].index)

    def region(self, node: str) -> int:
        r = self.nodes[node].region
        if r is None:
            raise KeyError(f"{node} has no region")
        return r

    def distributor_of_region(self, region: int) -> str:
        for d in self.distributors:
            if self.nodes[d].region == region:
                return d
        raise KeyError(region)


def build_topology(config: ScenarioConfig) -> Topology:
    """One manufacturer, one distributor and one hospital per region."""
    if config.num_regions < 1:
        raise TopologyError("need at least one region")
    nodes = {"manufacturer-0": AgentId("manufacturer", 0)}
    edges = []
    for r in range(config.num_regions):
        d, h = f"distributor-{r}", f"hospital-{r}"
        nodes[d] = AgentId("distributor", r, r)
        nodes[h] = AgentId("hospital", r, r)
        edges += [(h, d), (d, "manufacturer-0")]
    topo = Topology(nodes, tuple(edges), config.lead_time_days)
    topo.validate()
    return topo


@dataclass(frozen=True)
class Shipment:
    sid: str
    src: str
    dst: str
    drug: int
    quantity: int
    ship_day: int
    arrival_day: int
    kind: str  # allocation | fulfillment | reserve


@dataclass(frozen=True)
class WorldState:
    day: int
    num_drugs: int
    hospitals: dict[str, HospitalState]
    distributors: dict[str, DistributorState]
    manufacturers: dict[str, ManufacturerState]
    shipments: tuple[Shipment, ...] = ()
    inbox: dict[str, tuple] = field(default_factory=dict)

    def pipeline_to(self, agent: str) -> tuple[int, ...]:
        p = [0] * self.num_drugs
        for s in self.shipments:
            if s.dst == agent:
                p[s.drug] += s.quantity
        return tuple(p)

    def inventories(self) -> dict[str, tuple[int, ...]]:
        inv = {a: st.available for a, st in self.manufacturers.items()}
        inv.update({a: st.inventory for a, st in self.distributors.items()})
        inv.update({a: st.inventory for a, st in self.hospitals.items()})
        return dict(sorted(inv.items()))

    def on_hand(self) -> list[int]:
        tot = [0] * self.num_drugs
        for v in self.inventories().values():
            for d, q in enumerate(v):
                tot[d] += q
        return tot

    def in_transit(self) -> list[int]:
        tot = [0] * self.num_drugs
        for s in self.shipments:
            tot[s.drug] += s.quantity
        return tot


def initial_world(config: ScenarioConfig, topology: Topology) -> WorldState:
    """Hospitals start at their buffer target; each distributor holds one buffer's worth for its hospitals."""
    D = config.num_drugs
    hospitals = {}
    for h in topology.hospitals:
        r = topology.region(h)
        b = tuple(config.buffer_targets[r])
        hospitals[h] = HospitalState(b, b, (0,) * D, tuple(config.drug_criticality), (0,) * D)
    distributors = {}
    for d in topology.distributors:
        stock = [0] * D
        for h in topology.downstream(d):
            for k in range(D):
                stock[k] += hospitals[h].buffer_target[k]
        distributors[d] = DistributorState(tuple(stock), (0,) * D)
    manufacturers = {
        m: ManufacturerState((0,) * D, tuple(config.manufacturer_capacity)) for m in topology.manufacturers
    }
    return WorldState(0, D, hospitals, distributors, manufacturers)


class Policy(Protocol):
    name: str

    def hospital(self, obs: Observation) -> HospitalDecision: ...

    def distributor(self, obs: Observation, orders: Sequence[OrderMsg]) -> DistributorDecision: ...

    def manufacturer(self, obs: Observation, regional_demand: dict[int, tuple[int, ...]]) -> ManufacturerDecision: ...


class BuiltinPolicy:
    name = "builtin"

    def hospital(self, obs):
        return hospital_decide(obs)

    def distributor(self, obs, orders):
        return distributor_decide(obs, orders)

    def manufacturer(self, obs, regional_demand):
        return manufacturer_decide(obs, regional_demand)


@dataclass(frozen=True)
class Environment:
    config: ScenarioConfig
    timeline: Timeline
    topology: Topology


@dataclass
class RoundOutcome:
    day: int
    orders: list[OrderMsg] = field(default_factory=list)
    aggregates: list[AggregateDemandMsg] = field(default_factory=list)
    allocations: list[AllocationMsg] = field(default_factory=list)
    fulfillments: list[FulfillmentMsg] = field(default_factory=list)
    delivered: list[Shipment] = field(default_factory=list)
    scheduled: list[Shipment] = field(default_factory=list)
    demand: dict[str, tuple[int, ...]] = field(default_factory=dict)
    served_on_time: dict[str, tuple[int, ...]] = field(default_factory=dict)
    consumption: dict[str, tuple[int, ...]] = field(default_factory=dict)
    backlog: dict[str, tuple[int, ...]] = field(default_factory=dict)
    post_delivery: dict[str, tuple[int, ...]] = field(default_factory=dict)
    produced: dict[str, tuple[int, ...]] = field(default_factory=dict)
    disrupted: dict[str, bool] = field(default_factory=dict)
    decisions: Counter = field(default_factory=Counter)
    end_inventory: dict[str, tuple[int, ...]] | None = None

    def unmet_orders(self) -> dict[str, tuple[int, ...]]:
        shipped = {f.hospital: f.quantity for f in self.fulfillments}
        return {
            o.hospital: tuple(r - y for r, y in zip(o.quantity, shipped.get(o.hospital, (0,) * len(o.quantity))))
            for o in self.orders
        }

    def log_rows(self) -> list[tuple]:
        """Round-log rows ``(day, msg_type, src, dst, drug, quantity)``."""
        rows = []
        for o in self.orders:
            rows += [(self.day, "order", o.hospital, o.distributor, d, q) for d, q in enumerate(o.quantity)]
        for a in self.aggregates:
            rows += [(self.day, "aggregate_demand", a.distributor, a.manufacturer, d, q) for d, q in enumerate(a.total)]
        for a in self.allocations:
            rows += [(self.day, "allocation", a.manufacturer, a.distributor, d, q) for d, q in enumerate(a.quantity)]
        for f in self.fulfillments:
            rows += [(self.day, "fulfillment", f.distributor, f.hospital, d, q) for d, q in enumerate(f.quantity)]
        return rows


def _check_decision(invariant: str, ok: bool, detail: str) -> None:
    if not ok:
        raise InvariantViolation(invariant, detail)


def run_round(day: int, world: WorldState, env: Environment, policy: Policy) -> RoundOutcome:
    """Compute one day of the protocol. ``world`` is left untouched."""
    cfg, tl, topo = env.config, env.timeline, env.topology
    if day != world.day + 1:
        raise ValueError(f"round for day {day} but world is at day {world.day}")
    if not 1 <= day <= cfg.horizon_days:
        raise ValueError(f"day {day} outside horizon 1..{cfg.horizon_days}")
    D = world.num_drugs
    out = RoundOutcome(day)
    if len(topo.manufacturers) != 1:
        raise TopologyError("the round engine drives exactly one manufacturer")
    manu = topo.manufacturers[0]

    inv = {a: list(v) for a, v in world.inventories().items()}
    pending = []
    for s in world.shipments:
        if s.arrival_day <= day:
            out.delivered.append(s)
            inv[s.dst][s.drug] += s.quantity
        else:
            pending.append(s)

    def pipeline(agent: str) -> tuple[int, ...]:
        p = [0] * D
        for s in pending:
            if s.dst == agent:
                p[s.drug] += s.quantity
        return tuple(p)

    for agent in [manu, *topo.distributors]:
        out.disrupted[agent] = disruption_draw(cfg, agent, day)

    # hospitals consume: oldest backlog first, then today's demand
    for h in topo.hospitals:
        r = topo.region(h)
        out.post_delivery[h] = tuple(inv[h])
        demand, on_time, used, backlog = [], [], [], []
        for d in range(D):
            want = tl.demand_at(r, d, day)
            owed = world.hospitals[h].backlog[d]
            stock = inv[h][d]
            from_backlog = min(stock, owed)
            today = min(stock - from_backlog, want)
            inv[h][d] = stock - from_backlog - today
            demand.append(want)
            on_time.append(today)
            used.append(from_backlog + today)
            backlog.append(owed - from_backlog + want - today)
        out.demand[h] = tuple(demand)
        out.served_on_time[h] = tuple(on_time)
        out.consumption[h] = tuple(used)
        out.backlog[h] = tuple(backlog)

    # hospitals order
    orders_by_dist: dict[str, list[OrderMsg]] = {d: [] for d in topo.distributors}
    for h in topo.hospitals:
        r = topo.region(h)
        st = world.hospitals[h]
        horizon = min(FORECAST_WINDOW, cfg.horizon_days - day + 1)
        forecast = tool_epidemic_predictor(tl, r, day, horizon)
        obs = Observation(
            day=day,
            agent_id=h,
            role="hospital",
            inventory=tuple(inv[h]),
            pipeline=pipeline(h),
            buffer=st.buffer_target,
            backlog=out.backlog[h],
            criticality_weights=st.criticality_weight,
            forecast=tuple(tuple(float(v) for v in row) for row in forecast),
            messages=world.inbox.get(h, ()),
        )
        dec = _decide(policy.hospital, h, day, obs)
        out.decisions[h] += 1
        _check_decision("order_nonnegative", all(q >= 0 for q in dec.orders) and len(dec.orders) == D,
                        f"{h} day {day} orders {dec.orders}")
        dist = topo.upstream(h)
        msg = OrderMsg(h, dist, tuple(int(q) for q in dec.orders), tuple(dec.forecast), tuple(dec.criticality))
        out.orders.append(msg)
        orders_by_dist[dist].append(msg)

    # distributors forward aggregate demand
    regional_demand: dict[int, tuple[int, ...]] = {}
    for dist in topo.distributors:
        total = tuple(sum(o.quantity[d] for o in orders_by_dist[dist]) for d in range(D))
        r = topo.region(dist)
        regional_demand[r] = total
        out.aggregates.append(AggregateDemandMsg(r, dist, topo.upstream(dist), total, out.disrupted[dist]))

    # manufacturer produces and allocates
    halted = out.disrupted[manu]
    produced = tuple(0 if halted else cfg.capacity_on(day, d) for d in range(D))
    out.produced[manu] = produced
    for d in range(D):
        inv[manu][d] += produced[d]
    regions = list(range(cfg.num_regions))
    obs = Observation(
        day=day,
        agent_id=manu,
        role="manufacturer",
        inventory=tuple(inv[manu]),
        pipeline=(0,) * D,
        disrupted=halted,
        severity=tuple(tl.infected(r, day) / cfg.sir_params[r].population for r in regions),
        infected=tuple(tl.infected(r, day) for r in regions),
        population=tuple(cfg.sir_params[r].population for r in regions),
        capacity=tuple(cfg.manufacturer_capacity),
        alpha=cfg.alpha,
        epsilon=cfg.epsilon,
        messages=tuple(out.aggregates),
    )
    mdec = _decide(policy.manufacturer, manu, day, obs, regional_demand)
    out.decisions[manu] += 1
    _check_decision("allocation_shape", sorted(mdec.allocations) == regions,
                    f"{manu} day {day} allocated to {sorted(mdec.allocations)}")
    for d in range(D):
        xs = [mdec.allocations[r][d] for r in regions]
        _check_decision("allocation_feasible", all(x >= 0 for x in xs) and sum(xs) <= inv[manu][d],
                        f"day {day} drug {d}: {xs} from stock {inv[manu][d]}")
        if halted:
            _check_decision("halted_no_allocation", sum(xs) == 0, f"halted manufacturer allocated {xs}")
    seq = 0
    for r in regions:
        dist = topo.distributor_of_region(r)
        q = tuple(int(v) for v in mdec.allocations[r])
        fair = mdec.fairness[r] if r < len(mdec.fairness) else 0.0
        out.allocations.append(AllocationMsg(r, manu, dist, q, float(fair)))
        for d, v in enumerate(q):
            inv[manu][d] -= v
            if v:
                out.scheduled.append(Shipment(f"{day}:{seq}", manu, dist, d, v, day, day + topo.lead_time, "allocation"))
                seq += 1

    # distributors sub-allocate from on-hand stock
    for dist in topo.distributors:
        orders = orders_by_dist[dist]
        incoming = [0] * D
        for s in pending + [s for s in out.scheduled if s.dst == dist]:
            if s.dst == dist:
                incoming[s.drug] += s.quantity
        delayed = out.disrupted[dist]
        obs = Observation(
            day=day,
            agent_id=dist,
            role="distributor",
            inventory=tuple(inv[dist]),
            pipeline=tuple(incoming),
            disrupted=delayed,
            messages=tuple(world.inbox.get(dist, ())) + tuple(orders),
        )
        ddec = _decide(policy.distributor, dist, day, obs, orders)
        out.decisions[dist] += 1
        arrival = day + topo.lead_time + (1 if delayed else 0)
        for o in orders:
            y = tuple(int(v) for v in ddec.shipments.get(o.hospital, (0,) * D))
            _check_decision("cap_respect", len(y) == D and all(0 <= a <= b for a, b in zip(y, o.quantity)),
                            f"{dist} day {day} ships {y} against order {o.quantity}")
            out.fulfillments.append(FulfillmentMsg(o.hospital, dist, y, delayed))
            for d, v in enumerate(y):
                inv[dist][d] -= v
                if v:
                    out.scheduled.append(Shipment(f"{day}:{seq}", dist, o.hospital, d, v, day, arrival, "fulfillment"))
                    seq += 1
        for d in range(D):
            _check_decision("distributor_feasible", inv[dist][d] >= 0,
                            f"{dist} day {day} drug {d} shipped more than on hand")

    # zero lead time lands at the end of the same day
    for s in out.scheduled:
        if s.arrival_day <= day:
            out.delivered.append(s)
            inv[s.dst][s.drug] += s.quantity

    out.end_inventory = {a: tuple(v) for a, v in sorted(inv.items())}
    return out


def _decide(fn, agent: str, day: int, *args):
    try:
        return fn(*args)
    except InvariantViolation:
        raise
    except Exception as exc:  # noqa: BLE001 - any policy failure aborts the round
        raise RoundAbort(f"policy for {agent} failed on day {day}: {exc!r}") from exc


def _add(vec: tuple[int, ...], d: int, q: int) -> tuple[int, ...]:
    out = list(vec)
    out[d] += q
    return tuple(out)


def apply_outcome(world: WorldState, outcome: RoundOutcome) -> WorldState:
    """Install a day's movements. Any conservation or sign violation is a hard failure."""
    if outcome.day != world.day + 1:
        raise ValueError(f"outcome for day {outcome.day} cannot follow day {world.day}")
    before = [a + b for a, b in zip(world.on_hand(), world.in_transit())]
    inv = {a: list(v) for a, v in world.inventories().items()}
    pending = {s.sid: s for s in world.shipments}
    for s in outcome.scheduled:
        pending[s.sid] = s
    for s in outcome.delivered:
        if pending.pop(s.sid, None) is None:
            raise InvariantViolation("shipment_ledger", f"delivered unknown shipment {s.sid}")
        inv[s.dst][s.drug] += s.quantity
    for h, used in outcome.consumption.items():
        for d, q in enumerate(used):
            inv[h][d] -= q
    for m, made in outcome.produced.items():
        for d, q in enumerate(made):
            inv[m][d] += q
    for s in outcome.scheduled:
        inv[s.src][s.drug] -= s.quantity

    for agent, v in inv.items():
        if any(q < 0 for q in v):
            raise InvariantViolation("non_negative_stock", f"{agent} would hold {v} after day {outcome.day}")
    if outcome.end_inventory is not None and {a: tuple(v) for a, v in inv.items()} != outcome.end_inventory:
        raise InvariantViolation("state_consistency", f"day {outcome.day} end inventories disagree with the round")

    shipments = tuple(sorted(pending.values(), key=lambda s: (s.arrival_day, s.sid)))
    hospitals = {}
    for h, st in world.hospitals.items():
        p = [0] * world.num_drugs
        for s in shipments:
            if s.dst == h:
                p[s.drug] += s.quantity
        hospitals[h] = dataclasses.replace(
            st, inventory=tuple(inv[h]), pipeline=tuple(p), backlog=outcome.backlog.get(h, st.backlog)
        )
    distributors = {}
    for dist, st in world.distributors.items():
        p = [0] * world.num_drugs
        for s in shipments:
            if s.dst == dist:
                p[s.drug] += s.quantity
        distributors[dist] = DistributorState(tuple(inv[dist]), tuple(p), outcome.disrupted.get(dist, False))
    manufacturers = {
        m: dataclasses.replace(st, available=tuple(inv[m]), disrupted=outcome.disrupted.get(m, False))
        for m, st in world.manufacturers.items()
    }
    inbox: dict[str, tuple] = {}
    for f in outcome.fulfillments:
        inbox[f.hospital] = inbox.get(f.hospital, ()) + (f,)
    for a in outcome.allocations:
        inbox[a.distributor] = inbox.get(a.distributor, ()) + (a,)
    nxt = WorldState(outcome.day, world.num_drugs, hospitals, distributors, manufacturers, shipments, inbox)

    after = [a + b for a, b in zip(nxt.on_hand(), nxt.in_transit())]
    for d in range(world.num_drugs):
        made = sum(v[d] for v in outcome.produced.values())
        used = sum(v[d] for v in outcome.consumption.values())
        if after[d] - before[d] != made - used:
            raise InvariantViolation(
                "goods_conservation",
                f"day {outcome.day} drug {d}: stock moved {after[d] - before[d]} but produced-consumed = {made - used}",
            )
    return nxt


def apply_deployments(
    world: WorldState,
    day: int,
    deployments: dict[int, Sequence[int]],
    topology: Topology,
) -> tuple[WorldState, list[Shipment]]:
    """Ship emergency-reserve units to regional distributors (arriving after the lead time)."""
    extra = []
    n = 0
    for region in sorted(deployments):
        dist = topology.distributor_of_region(region)
        for d, q in enumerate(deployments[region]):
            if q < 0:
                raise InvariantViolation("non_negative_stock", f"negative reserve deployment {q}")
            if q:
                extra.append(Shipment(f"{day}:r{n}", "reserve", dist, d, int(q), day, day + max(topology.lead_time, 1), "reserve"))
                n += 1
    if not extra:
        return world, []
    shipments = tuple(sorted(world.shipments + tuple(extra), key=lambda s: (s.arrival_day, s.sid)))
    distributors = {
        name: dataclasses.replace(st, pipeline=tuple(
            sum(s.quantity for s in shipments if s.dst == name and s.drug == d) for d in range(world.num_drugs)
        ))
        for name, st in world.distributors.items()
    }
    return dataclasses.replace(world, shipments=shipments, distributors=distributors), extra
