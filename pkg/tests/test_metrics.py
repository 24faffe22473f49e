import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medsupply.ledger import AuditRecord
from medsupply.metrics import (
    UNRECOVERED,
    MetricsError,
    fairness_deviation,
    fulfillment_efficiency,
    load_run_logs,
    resilience,
    service_summary,
    summarize_sweep,
    throughput,
    throughput_series,
)
from medsupply.runner import simulate, write_run
from medsupply.scenario import default_config


def scan_taus(series, theta, buffer):
    """Brute force: every day below theta that is not inside an earlier open episode."""
    taus, busy_until = [], -1
    for t, v in enumerate(series):
        if t <= busy_until or v >= theta:
            continue
        later = [u for u in range(t + 1, len(series)) if series[u] >= buffer]
        if not later:
            taus.append(math.inf)
            break
        taus.append(later[0] - t)
        busy_until = later[0]
    return taus


def test_resilience_examples():
    assert resilience([50, 60, 100], 10, 100) == []
    eps = resilience([5, 20, 60, 100], 10, 100)
    assert [(e.start_day, e.tau) for e in eps] == [(1, 3)]
    last = resilience([100, 100, 5], 10, 100)
    assert last[0].tau == UNRECOVERED and not last[0].recovered
    with pytest.raises(ValueError):
        resilience([1], 10, 10)


@given(st.lists(st.integers(0, 120), max_size=60), st.integers(1, 50))
@settings(max_examples=300, deadline=None)
def test_resilience_matches_scan(series, theta):
    assert [e.tau for e in resilience(series, theta, 100)] == scan_taus(series, theta, 100)


def test_fairness_examples():
    assert fairness_deviation([10, 20, 30], [1, 2, 3]) == pytest.approx([0, 0, 0], abs=1e-15)
    assert fairness_deviation([1, 0], [0, 1]) == [1.0, 1.0]
    assert max(fairness_deviation([665, 245, 90], [66524, 24473, 9003])) <= 6e-4
    assert fairness_deviation([0, 0], [0, 0]) == [0.0, 0.0]
    assert fairness_deviation([0, 0], [1, 2]) is None
    assert fairness_deviation([1, 2], [0, 0]) is None


@given(st.lists(st.tuples(st.integers(0, 10**6), st.floats(0, 1e6)), min_size=1, max_size=6))
@settings(max_examples=300, deadline=None)
def test_fairness_bounds(pairs):
    x, w = zip(*pairs)
    d = fairness_deviation(x, w)
    if d is not None:
        assert all(0 <= v <= 1 + 1e-12 for v in d)


def test_efficiency_examples():
    assert fulfillment_efficiency([5, 5], [5, 5]) == 1.0
    assert fulfillment_efficiency([0, 0], [3, 4]) == 0.0
    assert fulfillment_efficiency([30, 40], [60, 40]) == 0.7
    assert fulfillment_efficiency([0], [0]) is None


@given(st.lists(st.tuples(st.integers(0, 100), st.integers(0, 100)), min_size=1, max_size=5), st.integers(0, 4))
@settings(max_examples=200, deadline=None)
def test_efficiency_monotone(pairs, idx):
    d = [max(a, b) for a, b in pairs]
    o = [min(a, b) for a, b in pairs]
    base = fulfillment_efficiency(o, d)
    i = idx % len(o)
    if base is None or o[i] >= d[i]:
        return
    o2 = list(o)
    o2[i] += 1
    assert fulfillment_efficiency(o2, d) >= base


@pytest.fixture(scope="module")
def run30():
    return simulate(default_config(days=30, seed=1, disruption_prob=0.1))


def test_throughput_partition(run30):
    chain = run30.ledger.chain
    tp = throughput_series(chain, range(0, 31))
    assert sum(tp.values()) == len(chain)
    assert sum(run30.report.throughput.values()) == len(chain)
    assert throughput(chain, 999) == 0


def test_throughput_matches_round_log_count(run30):
    day = 7
    rows = [r for r in run30.round_log if r[0] == day]
    disrupted = sum(1 for e in run30.events if e.day == day and e.kind == "disruption")
    # allocation, inventory and snapshot commits, plus two records per disruption report
    assert rows and throughput(run30.ledger.chain, day) == 3 + 2 * disrupted


def test_throughput_refuses_tampered_chain(run30):
    chain = list(run30.ledger.chain)
    chain[3] = AuditRecord(**{**chain[3].__dict__, "timestamp": 77})
    with pytest.raises(MetricsError):
        throughput_series(chain, [1])


def test_abundance_summary(run30):
    r = run30.report
    assert (r.service_level, r.unfulfilled_pct) == (100.0, 0.0)
    assert r.audit_pass_rate == 1.0
    assert all(v is None or 0 <= v <= 1 for v in r.efficiency.values())


def test_starvation_lowers_service():
    res = simulate(default_config(days=40, seed=1, manufacturer_capacity=(0, 0, 0), reserve_stock=(0, 0, 0)))
    assert res.report.service_level < 100.0
    assert sum(res.report.stockout_days.values()) > 0
    assert math.isclose(res.report.service_level + res.report.unfulfilled_pct, 100.0)


def test_summary_refuses_missing_days(run30):
    logs = run30.logs()
    logs.chain = [r for r in logs.chain if not (r.action == "snapshot_commit" and r.timestamp == 4)]
    with pytest.raises(MetricsError, match="4"):
        service_summary(logs)


def test_metrics_from_exported_files_match(run30, tmp_path):
    write_run(run30, tmp_path)
    again = service_summary(load_run_logs(tmp_path))
    assert again.to_json() == run30.report.to_json()
    on_disk = json.loads((tmp_path / "metrics.json").read_text())
    assert on_disk == json.loads(json.dumps(run30.report.to_json()))
    assert on_disk["schema_version"] == 1
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("day,")


def test_sweep_summary_table(run30):
    text = summarize_sweep({"a": run30.report})
    assert text.splitlines()[0] == "run,service_level,unfulfilled_pct,mean_tau,mean_delta"
    assert text.splitlines()[1].startswith("a,100.0,0.0,")
