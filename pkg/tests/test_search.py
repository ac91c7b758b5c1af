import numpy as np
import pytest

from infermeter.core import RequestSpec
from infermeter.metrics import DeadlineSpec, compute_request_metrics
from infermeter.search import (InfeasibleAtCeiling, InfeasibleAtFloor, SloSpec, SloSyntaxError, attainment_fraction,
                               capacity_search, fluid_rate_search, max_probes, parse_slo)
from infermeter.simengine import PolicyConfig, simulate
from infermeter.workload import assign_arrivals, synthesize

from conftest import paced_timeline
from oracles import enumerate_deadlines, linear_scan_max, linear_scan_min


def step(threshold):
    return lambda q: q <= threshold


def test_capacity_step_evaluator():
    res = capacity_search(step(7.3), q_lo=0.1, q_hi_seed=1.0, tol_rel=0.05)
    oracle = linear_scan_max(step(7.3), 0.1, 20.0, 0.01)
    assert oracle == pytest.approx(7.3)
    assert 6.95 <= res.max_qps <= 7.3
    assert abs(res.max_qps - oracle) <= 0.05 * oracle
    hi = max(p.qps for p in res.probes)
    assert len(res.probes) <= max_probes(0.1, hi, 0.05)
    for p in res.probes:
        if p.qps > res.max_qps * 1.05:
            assert not p.attained


@pytest.mark.parametrize("threshold", [0.15, 0.9, 3.3, 50.0, 1234.5])
def test_capacity_within_tolerance_of_oracle(threshold):
    res = capacity_search(step(threshold), q_lo=0.1, q_hi_seed=1.0, tol_rel=0.02)
    assert threshold / 1.02 <= res.max_qps <= threshold


def test_capacity_unbounded_flag():
    res = capacity_search(lambda q: True, q_lo=0.1, q_hi_seed=1.0)
    assert res.unbounded
    assert res.max_qps == 2.0**19
    assert len(res.probes) == 21


def test_capacity_infeasible_at_floor():
    with pytest.raises(InfeasibleAtFloor):
        capacity_search(lambda q: False, q_lo=0.1)


def test_capacity_repetitions_are_anded():
    calls = []

    def flaky(q):
        calls.append(q)
        return q <= 5 and len(calls) % 3 != 0

    res = capacity_search(flaky, q_lo=0.1, q_hi_seed=1.0, repetitions=2)
    assert res.max_qps <= 5


def test_capacity_nonmonotone_recorded():
    seen = {}

    def weird(q):
        seen[q] = True
        return q <= 3 or 3.2 < q <= 3.4

    res = capacity_search(weird, q_lo=0.1, q_hi_seed=1.0, tol_rel=0.01)
    assert res.max_qps <= 3.4


def test_capacity_judges_request_metrics_with_slo():
    slo = parse_slo("p90 ttft<1s")
    d = DeadlineSpec(10, 1)

    def evaluate(q):
        w = assign_arrivals(synthesize("azure-conv-2024", 200, 1), "poisson", q, 1)
        rec = simulate(w, PolicyConfig("chunked_prefill"), seed=1)
        return [compute_request_metrics(t, s, d) for t, s in zip(rec.timelines, w)]

    a = capacity_search(evaluate, slo, q_lo=0.1, q_hi_seed=0.5, tol_rel=0.1)
    b = capacity_search(evaluate, slo, q_lo=0.1, q_hi_seed=0.5, tol_rel=0.1)
    assert a.max_qps == b.max_qps
    assert all("attainment" in p.summary for p in a.probes)


# -- fluid rate

def paced_set(n_req=20, gap=0.02, n_tok=100):
    return [paced_timeline(0.3 + 0.01 * i, [gap] * (n_tok - 1)) for i in range(n_req)]


def requirement_met(tls, dps, dd, pct, thr):
    ok = 0
    for t, dp in zip(tls, dps):
        met, missed = enumerate_deadlines(t.token_arrivals().tolist(), dp, dd)
        ok += met / (met + missed) >= thr
    return ok / len(tls) >= pct / 100


def test_fluid_rate_paced():
    tls = paced_set()
    dps = [t.token_times[0] for t in tls]
    res = fluid_rate_search(tls, dps, 99, 1.0, dd_lo=0.001, dd_hi=0.2, tol_rel=0.005)
    oracle = linear_scan_min(lambda d: requirement_met(tls, dps, d, 99, 1.0), 0.001, 0.2, 1e-4)
    assert res.decode_deadline_s == pytest.approx(0.02, rel=0.05)
    assert abs(res.decode_deadline_s - oracle) <= 1e-4 + 1e-12
    assert res.rate_tokens_per_s == pytest.approx(1 / res.decode_deadline_s)


def test_fluid_rate_stall_requires_looser_deadline():
    clean = paced_set(5)
    stalled = [paced_timeline(t.token_times[0], [0.02] * 10 + [0.5] + [0.02] * 88) for t in clean]
    dps = [t.token_times[0] for t in clean]
    a = fluid_rate_search(clean, dps, 99, 1.0, 0.001, 1.0, 0.005)
    b = fluid_rate_search(stalled, dps, 99, 1.0, 0.001, 1.0, 0.005)
    assert b.decode_deadline_s > a.decode_deadline_s


def test_fluid_rate_vacuous_threshold():
    res = fluid_rate_search(paced_set(1), [1.0], 99, 0.0, dd_lo=0.005, dd_hi=0.5)
    assert res.decode_deadline_s == 0.005


def test_fluid_rate_infeasible_at_ceiling():
    tls = [paced_timeline(0.5, [0.02] * 10 + [10.0] + [0.02] * 10)]
    with pytest.raises(InfeasibleAtCeiling):
        fluid_rate_search(tls, [0.5], 99, 1.0, dd_lo=0.001, dd_hi=0.1)


def test_fluid_rate_matches_linear_scan_on_random_sets():
    rng = np.random.default_rng(42)
    for _ in range(100):
        tls = []
        for _ in range(int(rng.integers(1, 6))):
            n = int(rng.integers(2, 40))
            gaps = rng.uniform(0.005, 0.05, size=n - 1)
            if rng.random() < 0.3:
                gaps[rng.integers(0, n - 1)] += rng.uniform(0.1, 1.0)
            tls.append(paced_timeline(float(rng.uniform(0.1, 1.0)), gaps.tolist()))
        dps = [t.token_times[0] + float(rng.uniform(0, 0.3)) for t in tls]
        pct, thr = float(rng.choice([50, 90, 99])), float(rng.choice([0.5, 0.8, 0.9, 1.0]))
        res = fluid_rate_search(tls, dps, pct, thr, dd_lo=1e-3, dd_hi=2.0, tol_rel=1e-3)
        oracle = linear_scan_min(lambda d: requirement_met(tls, dps, d, pct, thr), 1e-3, 2.0, 1e-4)
        assert oracle is not None
        assert abs(res.decode_deadline_s - oracle) <= 1e-4 + 2e-3 * oracle


# -- SLO grammar

def test_parse_slo_full():
    s = parse_slo("p99 ttft<2s fluidity>0.9@0.99")
    assert s == SloSpec(99.0, ttft_bound_s=2.0, fluidity_threshold=0.9, attainment_target=0.99)


def test_parse_slo_units_and_default_target():
    s = parse_slo("p95 tbt<200ms")
    assert s.tbt_bound_s == pytest.approx(0.2)
    assert s.target == pytest.approx(0.95)


@pytest.mark.parametrize("bad", ["", "p99", "ttft>2s", "fluidity<0.9", "latency<1s", "ttft<2s@abc"])
def test_parse_slo_errors(bad):
    with pytest.raises(SloSyntaxError):
        parse_slo(bad)


def test_attainment_fraction():
    d = DeadlineSpec(10, 1)
    ms = [compute_request_metrics(paced_timeline(ttft, [0.01] * 5), RequestSpec("r", 1, 6), d)
          for ttft in (0.5, 1.5, 2.5, 0.1)]
    assert attainment_fraction(ms, parse_slo("ttft<2s")) == 0.75
