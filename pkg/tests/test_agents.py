import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsupply.agents import (
    AgentId,
    Observation,
    cap_and_redistribute,
    distributor_decide,
    fairness_weights,
    hospital_decide,
    manufacturer_decide,
    tool_allocation_engine,
    tool_criticality,
    tool_disruption_simulator,
    tool_epidemic_predictor,
    tool_fairness_floor,
    tool_order_estimator,
)
from medsupply.messages import OrderMsg, message_from_dict, message_to_dict
from medsupply.scenario import SIRParams, default_config, generate_scenario, resolve_config

from oracles import apportion, floor_by_brute_force, softmax_decimal

severities = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=6)


def hospital_obs(inventory, buffer, pipeline=None, backlog=None, crit=None):
    n = len(inventory)
    return Observation(
        day=1, agent_id="hospital-0", role="hospital", inventory=tuple(inventory),
        pipeline=tuple(pipeline or (0,) * n), buffer=tuple(buffer),
        backlog=tuple(backlog or (0,) * n), criticality_weights=tuple(crit or (1.0,) * n),
    )


def order(h, q, c):
    return OrderMsg(h, "distributor-0", tuple(q), tuple(q), tuple(c))


@pytest.mark.parametrize("b,i,p,want", [(100, 40, 30, 30), (100, 100, 0, 0), (100, 120, 50, 0)])
def test_order_estimator(b, i, p, want):
    assert tool_order_estimator(b, i, p) == want


def test_order_estimator_rejects_negative():
    with pytest.raises(ValueError):
        tool_order_estimator(10, -1, 0)


def test_engine_examples():
    assert tool_allocation_engine([0.3, 0.1, 0.9], 0.0, 300) == [100, 100, 100]
    assert tool_allocation_engine([0.7], 12.0, 250) == [250]


def test_engine_against_high_precision_oracle():
    w = softmax_decimal([2, 1, 0], 1)
    assert [round(float(x), 5) for x in w] == [0.66524, 0.24473, 0.09003]
    assert tool_allocation_engine([2, 1, 0], 1.0, 1000) == apportion(w, 1000) == [665, 245, 90]


def test_engine_survives_huge_scores():
    out = tool_allocation_engine([1e6, 0.0], 10.0, 50)
    assert out == [50, 0]
    with pytest.raises(ValueError):
        tool_allocation_engine([float("inf"), 0.0], 1.0, 5)


@given(severities, st.floats(0, 40), st.integers(0, 10**6))
@settings(max_examples=300, deadline=None)
def test_engine_sums_exactly_and_matches_oracle(sev, alpha, q):
    out = tool_allocation_engine(sev, alpha, q)
    assert sum(out) == q
    ref = apportion(softmax_decimal(sev, alpha), q)
    assert all(abs(a - b) <= 1 for a, b in zip(out, ref))


@given(severities, st.floats(0, 40), st.integers(0, 10**5), st.floats(-100, 100))
@settings(max_examples=300, deadline=None)
def test_shift_invariance(sev, alpha, q, c):
    shifted = [s + c for s in sev]
    assert tool_allocation_engine(sev, alpha, q) == tool_allocation_engine(shifted, alpha, q)


@given(severities, st.floats(0.01, 40), st.integers(0, 10**5))
@settings(max_examples=300, deadline=None)
def test_monotone_priority(sev, alpha, q):
    # quotas closer than the rounding resolution are ties, broken by index
    out = tool_allocation_engine(sev, alpha, q)
    w = fairness_weights(sev, alpha)
    for a in range(len(sev)):
        for b in range(len(sev)):
            if sev[a] > sev[b] and (w[a] - w[b]) * q > 1e-6:
                assert out[a] >= out[b]


def test_floor_examples():
    assert tool_fairness_floor([990, 10, 0], 0.0, 1000) == [990, 10, 0]
    assert tool_fairness_floor([990, 10, 0], 0.05, 1000) == floor_by_brute_force([990, 10, 0], 0.05, 1000)
    assert tool_fairness_floor([990, 10, 0], 0.05, 1000) == [900, 50, 50]
    assert tool_fairness_floor([300, 0, 0, 0], 0.25, 300) == [75, 75, 75, 75]


def test_floor_rejects_infeasible_epsilon():
    with pytest.raises(ValueError):
        tool_fairness_floor([10, 0, 0], 0.34, 10)
    with pytest.raises(ValueError):
        tool_fairness_floor([10, 0, 0], 0.1, 11)


@given(
    st.lists(st.integers(0, 10**4), min_size=1, max_size=6),
    st.integers(0, 20),
)
@settings(max_examples=300, deadline=None)
def test_floor_guarantee_and_oracle(alloc, eps_pct):
    eps = eps_pct / 100
    if eps * len(alloc) > 1:
        return
    q = sum(alloc)
    out = tool_fairness_floor(alloc, eps, q)
    assert sum(out) == q
    assert min(out) >= math.floor(eps_pct * q / 100)
    assert out == floor_by_brute_force(alloc, eps, q)
    above = [i for i, v in enumerate(alloc) if out[i] > math.floor(eps_pct * q / 100)]
    for a in above:
        for b in above:
            if alloc[a] > alloc[b]:
                assert out[a] >= out[b]


def test_criticality_examples():
    assert tool_criticality(100, 60, 40, 1.0) == 0.0
    assert tool_criticality(100, 0, 0, 1.0) == 1.0
    assert tool_criticality(200, 50, 50, 0.5) == 0.25
    assert tool_criticality(0, 0, 0, 1.0) == 0.0
    with pytest.raises(ValueError):
        tool_criticality(1, 0, 0, 1.5)


def test_epidemic_predictor():
    cfg = resolve_config(default_config(days=30, demand_noise_frac=0.0))
    t = generate_scenario(cfg)
    assert tool_epidemic_predictor(t, 0, 5, 0).shape == (0, 3)
    f = tool_epidemic_predictor(t, 1, 3, 4)
    assert f.shape == (4, 3)
    assert np.allclose(np.floor(t.projected[2, 1] + 0.5), t.demand[2, 1])
    with pytest.raises(ValueError):
        tool_epidemic_predictor(t, 0, 28, 5)


def test_epidemic_predictor_decays_without_transmission():
    cfg = default_config(days=20)
    cfg = resolve_config(cfg.replace(sir_params=tuple(SIRParams(0.0, 0.1, p.population, 500) for p in cfg.sir_params)))
    f = tool_epidemic_predictor(generate_scenario(cfg), 0, 1, 20)[:, 0]
    assert np.all(np.diff(f) < 0)


def test_disruption_simulator_delegates():
    a, b = np.random.default_rng(4), np.random.default_rng(4)
    from medsupply.scenario import sample_disruption
    assert [tool_disruption_simulator(0.4, a) for _ in range(50)] == [sample_disruption(0.4, b) for _ in range(50)]


def test_hospital_examples():
    d = hospital_decide(hospital_obs((100, 50), (100, 50)))
    assert d.orders == (0, 0)
    d = hospital_decide(hospital_obs((0, 0, 0), (100, 100, 100)))
    assert d.orders == (100, 100, 100)
    assert d.criticality == (1.0, 1.0, 1.0)
    obs = hospital_obs((10, 0), (100, 40), pipeline=(20, 5), backlog=(7, 0), crit=(0.5, 1.0))
    assert hospital_decide(obs) == hospital_decide(obs)
    assert hospital_decide(obs).orders == (77, 35)


def test_distributor_examples():
    obs = Observation(1, "distributor-0", "distributor", (100,))
    orders = [order("hospital-0", (100,), (1.0,)), order("hospital-1", (100,), (0.0,))]
    assert distributor_decide(obs, orders).shipments == {"hospital-0": (67,), "hospital-1": (33,)}
    rich = Observation(1, "distributor-0", "distributor", (500,))
    assert distributor_decide(rich, orders).shipments == {"hospital-0": (100,), "hospital-1": (100,)}
    empty = Observation(1, "distributor-0", "distributor", (0,))
    assert distributor_decide(empty, orders).shipments == {"hospital-0": (0,), "hospital-1": (0,)}


@given(
    st.lists(st.tuples(st.integers(0, 500), st.floats(0, 1)), min_size=1, max_size=5),
    st.integers(0, 1500),
)
@settings(max_examples=300, deadline=None)
def test_distributor_feasibility_and_caps(reqs, stock):
    obs = Observation(1, "distributor-0", "distributor", (stock,))
    orders = [order(f"hospital-{i}", (q,), (c,)) for i, (q, c) in enumerate(reqs)]
    y = distributor_decide(obs, orders).shipments
    assert sum(v[0] for v in y.values()) <= stock
    for i, (q, _) in enumerate(reqs):
        assert 0 <= y[f"hospital-{i}"][0] <= q
    # nothing is withheld while some order is unfilled
    assert sum(v[0] for v in y.values()) == min(stock, sum(q for q, _ in reqs))


def test_cap_and_redistribute_reaches_fixpoint():
    assert cap_and_redistribute([50, 30, 20], [10, 100, 100], [0.5, 0.3, 0.2]) == [10, 54, 36]
    assert cap_and_redistribute([50, 30, 20], [10, 10, 10], [1, 1, 1]) == [10, 10, 10]


def manu_obs(sev, inv, alpha=15.0, eps=0.05, disrupted=False):
    return Observation(1, "manufacturer-0", "manufacturer", tuple(inv), severity=tuple(sev),
                       alpha=alpha, epsilon=eps, disrupted=disrupted)


def test_manufacturer_examples():
    d = manufacturer_decide(manu_obs((0.1, 0.2), (100,)), {0: (0,), 1: (0,)})
    assert d.allocations == {0: (0,), 1: (0,)}
    d = manufacturer_decide(manu_obs((0.3, 0.3, 0.3), (300,), alpha=7.0), {r: (1000,) for r in range(3)})
    assert d.allocations == {0: (100,), 1: (100,), 2: (100,)}
    d = manufacturer_decide(manu_obs((0.1, 0.2), (100,), disrupted=True), {0: (50,), 1: (50,)})
    assert d.allocations == {0: (0,), 1: (0,)}


def test_manufacturer_pipeline_oracle():
    sev, alpha, eps, q = (0.05, 0.02, 0.01), 20.0, 0.05, 1000
    ref = floor_by_brute_force(apportion(softmax_decimal(sev, alpha), q), eps, q)
    d = manufacturer_decide(manu_obs(sev, (q,), alpha, eps), {r: (10**6,) for r in range(3)})
    assert [d.allocations[r][0] for r in range(3)] == ref
    assert d.fairness == pytest.approx([float(x) for x in softmax_decimal(sev, alpha)])


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=5),
    st.integers(0, 5000),
    st.lists(st.integers(0, 3000), min_size=5, max_size=5),
)
@settings(max_examples=300, deadline=None)
def test_manufacturer_respects_stock_and_demand(sev, q, dem):
    regional = {r: (dem[r],) for r in range(len(sev))}
    d = manufacturer_decide(manu_obs(sev, (q,)), regional)
    x = [d.allocations[r][0] for r in range(len(sev))]
    assert sum(x) <= q
    assert all(0 <= v <= dem[r] for r, v in enumerate(x))
    assert sum(x) == min(q, sum(dem[: len(sev)]))


def test_fairness_weights_validation():
    assert fairness_weights([], 3.0) == []
    with pytest.raises(ValueError):
        fairness_weights([0.1], -1.0)


def test_identity_and_message_round_trip():
    assert str(AgentId("hospital", 2, 2)) == "hospital-2"
    with pytest.raises(ValueError):
        AgentId("pharmacy", 0)
    m = order("hospital-1", (3, 4), (0.5, 0.25))
    assert message_from_dict(message_to_dict(m)) == m
    obs = Observation(2, "distributor-0", "distributor", (1, 2), messages=(m,))
    assert Observation.from_dict(obs.to_dict()) == obs
