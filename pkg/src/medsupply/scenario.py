"""Exogenous world generation: regional SIR epidemics, noisy demand, disruption draws.

Everything here is a pure function of a :class:`ScenarioConfig` and its seed.
Random draws come from per-purpose sub-streams keyed by
``(seed, purpose, *ids)`` so that adding or removing one kind of draw never
shifts another.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .rounding import exact_fraction

BASELINE_BETA = 0.375
DEFAULT_GAMMA = 0.1
MAX_SUBSTEP = 0.25
CONSERVATION_RTOL = 1e-6

_DEFAULT_POPULATIONS = (10000, 8000, 12000)
_DEFAULT_SEEDS = (20, 10, 5)


class ConfigError(ValueError):
    """A scenario configuration violates one of its invariants."""


@dataclass(frozen=True)
class SIRParams:
    beta: float
    gamma: float
    population: int
    initial_infected: float

    def validate(self) -> None:
        for name in ("beta", "gamma", "initial_infected"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigError(f"sir_params.{name} must be finite, got {v!r}")
        if self.beta < 0:
            raise ConfigError("sir_params.beta must be >= 0")
        if self.gamma < 0:
            raise ConfigError("sir_params.gamma must be >= 0")
        if isinstance(self.population, bool) or not isinstance(self.population, int) or self.population <= 0:
            raise ConfigError("sir_params.population must be a positive integer")
        if not 0 <= self.initial_infected <= self.population:
            raise ConfigError("sir_params.initial_infected must lie in [0, population]")

    def initial_state(self) -> "SIRState":
        i0 = float(self.initial_infected)
        return SIRState(float(self.population) - i0, i0, 0.0)


@dataclass(frozen=True)
class SIRState:
    s: float
    i: float
    r: float

    @property
    def total(self) -> float:
        return self.s + self.i + self.r


@dataclass(frozen=True)
class DemandSample:
    region: int
    drug: int
    expected: int
    noise_sigma: float


@dataclass(frozen=True)
class DisruptionParams:
    per_agent_probability: dict[str, float] = field(default_factory=dict)

    def probability(self, agent_id: str) -> float:
        return float(self.per_agent_probability.get(agent_id, 0.0))


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative scenario. ``None`` in the derived-quantity fields means "derive from the projection".

    ``buffer_targets`` is indexed ``[region][drug]`` (one hospital per region).
    ``production_outages`` lists inclusive ``[first_day, last_day]`` windows in
    which manufacturer capacity is zero.
    """

    num_regions: int = 3
    num_drugs: int = 3
    horizon_days: int = 30
    sir_params: tuple[SIRParams, ...] = ()
    drug_criticality: tuple[float, ...] = ()
    disruption: DisruptionParams = field(default_factory=DisruptionParams)
    alpha: float = 15.0
    epsilon: float = 0.05
    buffer_targets: tuple[tuple[int, ...], ...] | None = None
    lead_time_days: int = 1
    manufacturer_capacity: tuple[int, ...] | None = None
    reserve_stock: tuple[int, ...] | None = None
    demand_noise_frac: float = 0.1
    seed: int = 0
    production_outages: tuple[tuple[int, int], ...] = ()

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def capacity_on(self, day: int, drug: int) -> int:
        assert self.manufacturer_capacity is not None
        for first, last in self.production_outages:
            if first <= day <= last:
                return 0
        return self.manufacturer_capacity[drug]


# ---------------------------------------------------------------------------
# validation & (de)serialization


def _is_int(v: Any) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _agent_ids(num_regions: int) -> set[str]:
    ids = {"manufacturer-0"}
    ids.update(f"distributor-{r}" for r in range(num_regions))
    ids.update(f"hospital-{r}" for r in range(num_regions))
    return ids


def validate_config(cfg: ScenarioConfig, *, resolved: bool = True) -> None:
    """Raise :class:`ConfigError` naming the first violated invariant."""
    if not _is_int(cfg.num_regions) or cfg.num_regions < 1:
        raise ConfigError("num_regions must be an integer >= 1")
    if not _is_int(cfg.num_drugs) or cfg.num_drugs < 1:
        raise ConfigError("num_drugs must be an integer >= 1")
    if not _is_int(cfg.horizon_days) or cfg.horizon_days < 1:
        raise ConfigError("horizon_days must be an integer >= 1")
    if len(cfg.sir_params) != cfg.num_regions:
        raise ConfigError(f"sir_params needs {cfg.num_regions} entries, got {len(cfg.sir_params)}")
    for p in cfg.sir_params:
        p.validate()
    if len(cfg.drug_criticality) != cfg.num_drugs:
        raise ConfigError(f"drug_criticality needs {cfg.num_drugs} entries")
    for c in cfg.drug_criticality:
        if not (math.isfinite(c) and 0 <= c <= 1):
            raise ConfigError("drug_criticality entries must lie in [0, 1]")
    known = _agent_ids(cfg.num_regions)
    for agent, p in cfg.disruption.per_agent_probability.items():
        if agent not in known:
            raise ConfigError(f"disruption.per_agent_probability: unknown agent {agent!r}")
        if not (math.isfinite(p) and 0 <= p <= 1):
            raise ConfigError(f"disruption probability for {agent} must lie in [0, 1]")
    if not (math.isfinite(cfg.alpha) and cfg.alpha >= 0):
        raise ConfigError("alpha must be finite and >= 0")
    if not (math.isfinite(cfg.epsilon) and cfg.epsilon >= 0):
        raise ConfigError("epsilon must be finite and >= 0")
    if exact_fraction(cfg.epsilon) * cfg.num_regions > 1:
        raise ConfigError("epsilon * num_regions must be <= 1")
    if not _is_int(cfg.lead_time_days) or cfg.lead_time_days < 0:
        raise ConfigError("lead_time_days must be an integer >= 0")
    if not (math.isfinite(cfg.demand_noise_frac) and cfg.demand_noise_frac >= 0):
        raise ConfigError("demand_noise_frac must be finite and >= 0")
    if not _is_int(cfg.seed) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    for window in cfg.production_outages:
        if len(window) != 2 or not all(_is_int(d) for d in window) or not 1 <= window[0] <= window[1]:
            raise ConfigError(f"production_outages entry {window!r} must be [first_day, last_day] with 1 <= first <= last")

    if cfg.buffer_targets is not None:
        if len(cfg.buffer_targets) != cfg.num_regions or any(len(row) != cfg.num_drugs for row in cfg.buffer_targets):
            raise ConfigError("buffer_targets must be num_regions x num_drugs")
        if any(not _is_int(b) or b < 0 for row in cfg.buffer_targets for b in row):
            raise ConfigError("buffer_targets must be non-negative integers")
    elif resolved:
        raise ConfigError("buffer_targets unresolved")
    for name in ("manufacturer_capacity", "reserve_stock"):
        v = getattr(cfg, name)
        if v is None:
            if resolved:
                raise ConfigError(f"{name} unresolved")
            continue
        if len(v) != cfg.num_drugs or any(not _is_int(x) or x < 0 for x in v):
            raise ConfigError(f"{name} must hold num_drugs non-negative integers")


_FIELDS = {f.name for f in dataclasses.fields(ScenarioConfig)}
_SIR_FIELDS = {f.name for f in dataclasses.fields(SIRParams)}


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def config_from_dict(d: dict) -> ScenarioConfig:
    _reject_unknown(d, _FIELDS, "config")
    kw: dict[str, Any] = dict(d)
    if "sir_params" in kw:
        items = []
        for i, p in enumerate(kw["sir_params"]):
            _reject_unknown(p, _SIR_FIELDS, f"sir_params[{i}]")
            missing = _SIR_FIELDS - set(p)
            if missing:
                raise ConfigError(f"sir_params[{i}] missing {sorted(missing)}")
            items.append(SIRParams(**p))
        kw["sir_params"] = tuple(items)
    if "disruption" in kw:
        _reject_unknown(kw["disruption"], {"per_agent_probability"}, "disruption")
        probs = kw["disruption"].get("per_agent_probability", {})
        if not isinstance(probs, dict):
            raise ConfigError("disruption.per_agent_probability must be an object")
        kw["disruption"] = DisruptionParams(dict(probs))
    for name in ("drug_criticality", "manufacturer_capacity", "reserve_stock"):
        if kw.get(name) is not None:
            kw[name] = tuple(kw[name])
    if kw.get("buffer_targets") is not None:
        kw["buffer_targets"] = tuple(tuple(row) for row in kw["buffer_targets"])
    if "production_outages" in kw:
        kw["production_outages"] = tuple(tuple(w) for w in kw["production_outages"])
    return ScenarioConfig(**kw)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["disruption"] = {"per_agent_probability": dict(sorted(cfg.disruption.per_agent_probability.items()))}
    return json.loads(json.dumps(d))


def config_digest(cfg: ScenarioConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def default_config(
    regions: int = 3,
    drugs: int = 3,
    days: int = 30,
    severity: float = 0.8,
    disruption_prob: float = 0.1,
    seed: int = 0,
    **overrides: Any,
) -> ScenarioConfig:
    """The three-region pandemic layout; ``severity`` scales beta against :data:`BASELINE_BETA`."""
    beta = BASELINE_BETA * severity
    sir = tuple(
        SIRParams(beta, DEFAULT_GAMMA, _DEFAULT_POPULATIONS[r % 3], _DEFAULT_SEEDS[r % 3])
        for r in range(regions)
    )
    crit = tuple(round(max(0.1, 1.0 - 0.3 * (d % 4)), 2) for d in range(drugs))
    probs = {"manufacturer-0": disruption_prob}
    probs.update({f"distributor-{r}": disruption_prob for r in range(regions)})
    cfg = ScenarioConfig(
        num_regions=regions,
        num_drugs=drugs,
        horizon_days=days,
        sir_params=sir,
        drug_criticality=crit,
        disruption=DisruptionParams(probs),
        seed=seed,
    )
    return cfg.replace(**overrides)


# ---------------------------------------------------------------------------
# random sub-streams


def substream(seed: int, purpose: str, *ids: Any) -> np.random.Generator:
    """Independent generator for one ``(seed, purpose, ids...)`` key."""
    key = "|".join([str(int(seed)), purpose, *map(str, ids)])
    digest = hashlib.sha256(key.encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "big")))


# ---------------------------------------------------------------------------
# operations


def _sir_rhs(beta: float, gamma: float, n: float, s: float, i: float) -> tuple[float, float, float]:
    infection = beta * s * i / n
    recovery = gamma * i
    return -infection, infection - recovery, recovery


def integrate_sir(params: SIRParams, state: SIRState, dt: float) -> SIRState:
    """Advance one SIR state by ``dt`` days with fixed-step RK4 (substeps of at most 0.25 day)."""
    values = (params.beta, params.gamma, state.s, state.i, state.r, dt)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite SIR input: {values!r}")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    n = float(params.population)
    if abs(state.total - n) / n > CONSERVATION_RTOL:
        raise ValueError(f"state does not conserve population: {state.total} vs {n}")

    steps = max(1, math.ceil(dt / MAX_SUBSTEP - 1e-12))
    h = dt / steps
    b, g = params.beta, params.gamma
    s, i, r = state.s, state.i, state.r
    for _ in range(steps):
        k1 = _sir_rhs(b, g, n, s, i)
        k2 = _sir_rhs(b, g, n, s + 0.5 * h * k1[0], i + 0.5 * h * k1[1])
        k3 = _sir_rhs(b, g, n, s + 0.5 * h * k2[0], i + 0.5 * h * k2[1])
        k4 = _sir_rhs(b, g, n, s + h * k3[0], i + h * k3[1])
        s += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        i += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        r += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return SIRState(max(s, 0.0), max(i, 0.0), max(r, 0.0))


def sample_demand(
    infected: float,
    criticality: float,
    noise_frac: float,
    rng: np.random.Generator,
    *,
    region: int = 0,
    drug: int = 0,
) -> DemandSample:
    """Demand = round(I * c + N(0, noise_frac * I * c)), clamped at zero.

    Always consumes exactly one standard-normal draw.
    """
    if infected < 0 or noise_frac < 0:
        raise ValueError("infected and noise_frac must be >= 0")
    mean = infected * criticality
    sigma = noise_frac * mean
    z = float(rng.standard_normal())
    value = math.floor(mean + sigma * z + 0.5)
    return DemandSample(region, drug, max(0, int(value)), sigma)


def sample_disruption(p: float, rng: np.random.Generator) -> bool:
    """Bernoulli(p) from exactly one uniform draw."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"disruption probability {p!r} outside [0, 1]")
    return bool(rng.random() < p)


@dataclass
class Timeline:
    """Materialized scenario. Arrays are indexed by ``day - 1``."""

    config: ScenarioConfig
    sir: np.ndarray  # (T, R, 3)
    projected: np.ndarray  # (T, R, D) noiseless I*c
    demand: np.ndarray  # (T, R, D) integer realized demand
    noise_sigma: np.ndarray  # (T, R, D)

    @property
    def days(self) -> range:
        return range(1, self.config.horizon_days + 1)

    def sir_state(self, region: int, day: int) -> SIRState:
        s, i, r = self.sir[day - 1, region]
        return SIRState(float(s), float(i), float(r))

    def infected(self, region: int, day: int) -> float:
        return float(self.sir[day - 1, region, 1])

    def demand_at(self, region: int, drug: int, day: int) -> int:
        return int(self.demand[day - 1, region, drug])

    def demand_samples(self) -> list[DemandSample]:
        T, R, D = self.demand.shape
        return [
            DemandSample(r, d, int(self.demand[t, r, d]), float(self.noise_sigma[t, r, d]))
            for t in range(T)
            for r in range(R)
            for d in range(D)
        ]

    def sir_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["day", "region", "s", "i", "r"])
        for day in self.days:
            for region in range(self.config.num_regions):
                s, i, r = self.sir[day - 1, region]
                w.writerow([day, region, repr(float(s)), repr(float(i)), repr(float(r))])
        return buf.getvalue()

    def demand_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["day", "region", "drug", "demand"])
        for day in self.days:
            for region in range(self.config.num_regions):
                for drug in range(self.config.num_drugs):
                    w.writerow([day, region, drug, int(self.demand[day - 1, region, drug])])
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        return (self.sir_csv() + self.demand_csv()).encode()


def project_infected(cfg: ScenarioConfig) -> np.ndarray:
    """Noiseless S, I, R per day (1..T) and region, shape (T, R, 3)."""
    out = np.zeros((cfg.horizon_days, cfg.num_regions, 3))
    for r, params in enumerate(cfg.sir_params):
        state = params.initial_state()
        for t in range(cfg.horizon_days):
            state = integrate_sir(params, state, 1.0)
            out[t, r] = (state.s, state.i, state.r)
    return out


def resolve_config(cfg: ScenarioConfig, buffer_multiple: float = 3.0, capacity_multiple: float = 1.5, reserve_multiple: float = 2.0) -> ScenarioConfig:
    """Fill derived fields from the noiseless projection.

    * buffer target = ``buffer_multiple`` x peak projected daily demand of that hospital/drug
    * capacity = ``capacity_multiple`` x peak projected total daily demand of the drug
    * reserve = ``reserve_multiple`` x the same peak
    """
    validate_config(cfg, resolved=False)
    sir = project_infected(cfg)
    crit = np.asarray(cfg.drug_criticality, dtype=float)
    proj = sir[:, :, 1][:, :, None] * crit[None, None, :]
    changes: dict[str, Any] = {}
    if cfg.buffer_targets is None:
        peak = proj.max(axis=0)
        changes["buffer_targets"] = tuple(
            tuple(int(math.ceil(buffer_multiple * peak[r, d])) for d in range(cfg.num_drugs))
            for r in range(cfg.num_regions)
        )
    total_peak = proj.sum(axis=1).max(axis=0)
    if cfg.manufacturer_capacity is None:
        changes["manufacturer_capacity"] = tuple(int(math.ceil(capacity_multiple * x)) for x in total_peak)
    if cfg.reserve_stock is None:
        changes["reserve_stock"] = tuple(int(math.ceil(reserve_multiple * x)) for x in total_peak)
    out = cfg.replace(**changes)
    validate_config(out)
    return out


def generate_scenario(config: ScenarioConfig) -> Timeline:
    """Materialize the per-day epidemic and demand timeline for a resolved config."""
    validate_config(config)
    sir = project_infected(config)
    T, R, D = config.horizon_days, config.num_regions, config.num_drugs
    projected = np.zeros((T, R, D))
    demand = np.zeros((T, R, D), dtype=np.int64)
    sigma = np.zeros((T, R, D))
    for t in range(T):
        for r in range(R):
            infected = float(sir[t, r, 1])
            for d in range(D):
                c = config.drug_criticality[d]
                projected[t, r, d] = infected * c
                rng = substream(config.seed, "demand", r, d, t + 1)
                sample = sample_demand(infected, c, config.demand_noise_frac, rng, region=r, drug=d)
                demand[t, r, d] = sample.expected
                sigma[t, r, d] = sample.noise_sigma
    return Timeline(config, sir, projected, demand, sigma)


def disruption_draw(config: ScenarioConfig, agent_id: str, day: int) -> bool:
    rng = substream(config.seed, "disruption", agent_id, day)
    return sample_disruption(config.disruption.probability(agent_id), rng)
