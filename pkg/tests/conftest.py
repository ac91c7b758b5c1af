import itertools

import numpy as np
import pytest

from infermeter.core import TokenTimeline
from infermeter.simengine import LatencyModelConfig, PolicyConfig, serve_mock

_ids = itertools.count()


def paced_timeline(first, gaps, submit=0.0, tokens=None, schedule=None, request_id=None):
    times = [first]
    for g in gaps:
        times.append(times[-1] + g)
    return TokenTimeline(
        request_id=request_id or f"t{next(_ids)}", submit_time=submit, token_times=tuple(times),
        tokens_per_event=tuple(tokens) if tokens else (), schedule_time=schedule)


def random_timeline(rng, max_events=200):
    n = int(rng.integers(1, max_events))
    gaps = rng.exponential(rng.uniform(0.005, 0.08), size=n - 1)
    stalls = rng.random(n - 1) < 0.02
    gaps[stalls] += rng.uniform(0.2, 5.0, size=int(stalls.sum()))
    tokens = np.where(rng.random(n) < 0.1, rng.integers(2, 6, size=n), 1)
    return paced_timeline(float(rng.uniform(0.0, 3.0)), gaps.tolist(), tokens=tokens.tolist())


@pytest.fixture
def paced():
    return paced_timeline


@pytest.fixture(scope="session")
def mock_fast():
    with serve_mock(PolicyConfig(), time_scale=0) as srv:
        yield srv


@pytest.fixture(scope="session")
def mock_paced_50ms():
    cfg = PolicyConfig("prefill_priority", LatencyModelConfig(0.0, 0.0, 0.05, 0.0))
    with serve_mock(cfg, time_scale=1.0) as srv:
        yield srv


# -- acceptance summary: one PASS/FAIL line per criterion-marked test

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = mark.args[0]
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        prev = _criteria.get(key, (mark.args[1], True))
        _criteria[key] = (mark.args[1], prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        title, ok = _criteria[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {title}")
