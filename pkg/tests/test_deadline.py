import warnings

import numpy as np
import pytest

from infermeter.core import RequestSpec
from infermeter.deadline import (DeadlinePolicy, InsufficientPoints, NegativeCurvature, NonMonotoneDeadline,
                                 PrefillCurve, PrefillFit, make_deadlines, profile_prefill)
from infermeter.simengine import LatencyModelConfig, PolicyConfig


def sim(alpha, beta):
    return PolicyConfig("prefill_priority", LatencyModelConfig(alpha, beta, 0.02, 0.0))


def test_recovers_simulator_coefficients():
    fit = profile_prefill(sim(1e-3, 1e-7), [1000, 4000, 16000], reps_per_length=1)
    c0, c1, c2 = fit.coefficients
    assert c1 == pytest.approx(1e-3, rel=0.01)
    assert c2 == pytest.approx(1e-7, rel=0.01)
    assert abs(c0) < 1e-9


def test_linear_ground_truth_keeps_quadratic_fit():
    with warnings.catch_warnings():
        warnings.simplefilter("error", NegativeCurvature)
        fit = profile_prefill(sim(1e-3, 0.0), [512, 2048, 8192])
    assert abs(fit.coefficients[2]) < 1e-15
    assert not fit.linear_fallback


def test_two_lengths_insufficient():
    with pytest.raises(InsufficientPoints):
        profile_prefill(sim(1e-3, 0.0), [1000, 1000, 2000])


def test_fit_within_tolerance_of_samples():
    rng = np.random.default_rng(0)
    n = np.array([512, 1024, 2048, 4096, 8192, 16384] * 3)
    y = 0.01 + 2e-4 * n + 3e-9 * n**2
    y = y * (1 + rng.normal(0, 0.01, size=n.size))
    est = PrefillCurve().fit(n, y)
    fit = est.to_fit()
    assert fit.coefficients[2] >= 0
    for x, obs in fit.sample_points:
        assert abs(fit(x) - obs) <= max(0.10 * obs, 3 * fit.residual_rms)


def test_negative_curvature_falls_back_to_linear():
    n = np.array([1000, 2000, 4000, 8000])
    y = 1e-3 * n - 5e-8 * n**2
    with pytest.warns(NegativeCurvature):
        est = PrefillCurve().fit(n, y)
    assert est.linear_fallback_ and est.coef_[2] == 0.0


def test_estimator_api():
    est = PrefillCurve(curvature_tol=0.05)
    assert est.get_params() == {"curvature_tol": 0.05}
    n = np.array([1.0, 2.0, 3.0, 4.0])
    est.fit(n, 1 + 2 * n + 3 * n**2)
    assert est.predict([5.0]) == pytest.approx([1 + 10 + 75])
    assert est.score(n, 1 + 2 * n + 3 * n**2) == pytest.approx(1.0)


def test_prefill_fit_json_round_trip(tmp_path):
    fit = PrefillFit((0.1, 2e-4, 3e-9), ((512, 0.2), (1024, 0.3)), 1e-3)
    assert PrefillFit.load(fit.save(tmp_path / "f.json")) == fit


@pytest.mark.parametrize("slack,expected", [(0.5, 2.5), (5.0, 7.0)])
def test_make_deadlines_adds_slack(slack, expected):
    policy = DeadlinePolicy.linear(0.001, slack_s=slack, decode_deadline_s=0.04)
    d = make_deadlines(policy, RequestSpec("a", 2000, 10))
    assert d.prefill_deadline_s == pytest.approx(expected)
    assert d.decode_deadline_s == 0.04


def test_floor_prompt_positive():
    policy = DeadlinePolicy.linear(0.001)
    assert make_deadlines(policy, RequestSpec("a", 1, 1)).prefill_deadline_s == pytest.approx(0.501)


def test_decreasing_fit_fails_loudly():
    with pytest.raises(NonMonotoneDeadline):
        DeadlinePolicy(PrefillFit((1.0, -1e-3, 1e-9)))


def test_prefill_deadline_monotone_in_prompt_length():
    policy = DeadlinePolicy(PrefillFit((0.01, 1e-4, 2e-9)))
    vals = [make_deadlines(policy, RequestSpec("a", n, 1)).prefill_deadline_s for n in range(1, 40000, 97)]
    assert vals == sorted(vals)
