"""Per-request latency metrics, the deadline-based fluidity index, and percentile summaries."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import RequestSpec, TimelineError, TokenTimeline, validate_timeline

__all__ = [
    "DeadlineSpec",
    "RequestMetrics",
    "DistributionSummary",
    "UnfinishedTimeline",
    "ZeroTokens",
    "EmptySample",
    "compute_request_metrics",
    "fluidity_index",
    "summarize",
    "nearest_rank",
    "DEFAULT_PERCENTILES",
]

DEFAULT_PERCENTILES = (50, 90, 95, 99)


class UnfinishedTimeline(TimelineError):
    pass


class ZeroTokens(TimelineError):
    pass


class EmptySample(ValueError):
    pass


@dataclass(frozen=True)
class DeadlineSpec:
    """Prefill deadline (from submit) and per-token decode deadline, in seconds."""

    prefill_deadline_s: float
    decode_deadline_s: float

    def __post_init__(self):
        for name in ("prefill_deadline_s", "decode_deadline_s"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class RequestMetrics:
    request_id: str
    n_tokens: int
    ttft_s: float
    ttlt_s: float
    decode_time_s: float
    tbt_s: tuple
    normalized_latency_s_per_token: float
    fluidity_index: float
    deadlines_met: int
    deadlines_missed: int
    tpot_s: Optional[float] = None
    scheduling_delay_s: Optional[float] = None
    prefill_time_s: Optional[float] = None

    def to_row(self) -> dict:
        row = asdict(self)
        del row["tbt_s"]
        row["max_tbt_s"] = max(self.tbt_s) if self.tbt_s else None
        return row


def compute_request_metrics(t: TokenTimeline, spec: RequestSpec, d: DeadlineSpec) -> RequestMetrics:
    """Derive TTFT, TTLT, TBT, TPOT, normalized latency and fluidity for one request.

    Times are measured from ``submit_time``. TPOT is the mean of the per-token
    gap series, ``(last - first) / (n_tokens - 1)``, and is ``None`` for a
    single-token response. Bursts are expanded: an event with k tokens
    contributes k arrivals at the same instant, hence k-1 zero gaps.
    """
    validate_timeline(t)
    if not t.finished or t.finish_reason == "error":
        raise UnfinishedTimeline(f"request {t.request_id} did not finish")
    if not t.token_times:
        raise ZeroTokens(f"request {t.request_id} emitted no tokens")
    arrivals = t.token_arrivals()
    n = len(arrivals)
    first, last = float(arrivals[0]), float(arrivals[-1])
    ttft = first - t.submit_time
    ttlt = last - t.submit_time
    decode_time = last - first
    tbt = tuple(float(g) for g in np.diff(arrivals))
    tpot = decode_time / (n - 1) if n > 1 else None
    t_s = t.scheduling_delay
    t_p = None if t.schedule_time is None else first - t.schedule_time
    fl, met, missed = _fluidity(arrivals - t.submit_time, d)
    return RequestMetrics(
        request_id=t.request_id, n_tokens=n, ttft_s=ttft, ttlt_s=ttlt,
        decode_time_s=decode_time, tbt_s=tbt, normalized_latency_s_per_token=ttlt / n,
        fluidity_index=fl, deadlines_met=met, deadlines_missed=missed, tpot_s=tpot,
        scheduling_delay_s=t_s, prefill_time_s=t_p)


def fluidity_index(t: TokenTimeline, d: DeadlineSpec) -> tuple:
    """Fraction of per-token deadlines met, returned as ``(fluidity, met, missed)``.

    The first token is due ``prefill_deadline_s`` after submit and each later
    token ``decode_deadline_s`` after the previous deadline, so early tokens
    bank slack. A late token is charged one miss for every deadline that
    elapsed before it arrived, and the schedule restarts from its arrival.
    """
    validate_timeline(t)
    if not t.token_times:
        raise ZeroTokens(f"request {t.request_id} emitted no tokens")
    return _fluidity(t.token_arrivals() - t.submit_time, d)


def _fluidity(arrivals: np.ndarray, d: DeadlineSpec) -> tuple:
    dd = d.decode_deadline_s
    deadline = d.prefill_deadline_s
    met = missed = 0
    for a in arrivals.tolist():
        if a <= deadline:
            met += 1
            deadline += dd
        else:
            missed += math.floor((a - deadline) / dd) + 1
            deadline = a + dd
    return met / (met + missed), met, missed


@dataclass
class DistributionSummary:
    count: int
    mean: float
    min: float
    max: float
    percentiles: dict = field(default_factory=dict)
    cdf_points: Optional[list] = None

    def __getitem__(self, p) -> float:
        return self.percentiles[_pkey(p)]

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "min": self.min, "max": self.max,
                "percentiles": {str(k): v for k, v in self.percentiles.items()},
                "cdf_points": self.cdf_points}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSummary":
        return cls(count=d["count"], mean=d["mean"], min=d["min"], max=d["max"],
                   percentiles={_pkey(float(k)): v for k, v in d["percentiles"].items()},
                   cdf_points=d.get("cdf_points"))


def _pkey(p):
    p = float(p)
    return int(p) if p.is_integer() else p


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ceil(p/100 * n)."""
    n = len(sorted_values)
    if n == 0:
        raise EmptySample("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    rank = math.ceil(Fraction(str(p)) * n / 100)
    return sorted_values[max(rank, 1) - 1]


def summarize(values, percentiles=DEFAULT_PERCENTILES, keep_cdf: bool = False) -> DistributionSummary:
    vals = sorted(float(v) for v in values)
    if not vals:
        raise EmptySample("cannot summarize an empty sample")
    return DistributionSummary(
        count=len(vals), mean=math.fsum(vals) / len(vals), min=vals[0], max=vals[-1],
        percentiles={_pkey(p): nearest_rank(vals, p) for p in percentiles},
        cdf_points=vals if keep_cdf else None)
