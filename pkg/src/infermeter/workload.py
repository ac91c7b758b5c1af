"""Workloads: JSONL trace ingestion, log-normal length synthesis, arrival processes."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import RequestSpec, rng_stream
from .metrics import nearest_rank

__all__ = [
    "TraceStats",
    "PhaseStats",
    "LengthFilter",
    "PROFILES",
    "LogNormalLengths",
    "ParseError",
    "EmptyAfterFilter",
    "InfeasibleProfile",
    "MissingTimestamps",
    "load_trace",
    "synthesize",
    "assign_arrivals",
    "fit_diagnostics",
]

logger = logging.getLogger(__name__)

Z99 = float(norm.ppf(0.99))
Z75 = float(norm.ppf(0.75))


class ParseError(ValueError):
    def __init__(self, line: int, reason: str = ""):
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")
        self.line = line


class EmptyAfterFilter(ValueError):
    pass


class InfeasibleProfile(ValueError):
    pass


class MissingTimestamps(ValueError):
    pass


@dataclass(frozen=True)
class PhaseStats:
    median: float
    iqr: float
    p99: float


@dataclass(frozen=True)
class TraceStats:
    name: str
    prefill: PhaseStats
    decode: PhaseStats
    pd_ratio_median: Optional[float] = None
    pd_ratio_iqr: Optional[float] = None


# Token-length statistics of public production traces (median, IQR, P99).
PROFILES = {
    "azure-code-2024": TraceStats(
        "azure-code-2024", PhaseStats(1928, 2393, 7685), PhaseStats(8, 15, 276), 238, 686),
    "azure-conv-2024": TraceStats(
        "azure-conv-2024", PhaseStats(928, 1811, 6683), PhaseStats(41, 94, 694), 21, 63),
    "mooncake": TraceStats(
        "mooncake", PhaseStats(6345, 4243, 61616), PhaseStats(30, 343, 898), 163.5, 602),
}


@dataclass(frozen=True)
class LengthFilter:
    """Inclusive upper bounds on prompt and decode lengths."""

    max_prefill_tokens: Optional[int] = None
    max_decode_tokens: Optional[int] = None

    def accepts(self, prompt_tokens: int, decode_tokens: int) -> bool:
        if self.max_prefill_tokens is not None and prompt_tokens > self.max_prefill_tokens:
            return False
        if self.max_decode_tokens is not None and decode_tokens > self.max_decode_tokens:
            return False
        return True


# prefill < 16K and decode < 1K
SHORT_CONTEXT_FILTER = LengthFilter(max_prefill_tokens=16383, max_decode_tokens=1023)


class LogNormalLengths(BaseEstimator):
    """Log-normal token-length model pinned to a median and a P99.

    ``fit`` takes observed lengths and matches their empirical median and P99;
    :meth:`from_quantiles` sets the same two quantiles directly. The IQR of
    the fitted law is available as ``iqr_`` for comparison with a target.

    Parameters
    ----------
    min_length : int, default=1
        Samples are rounded to integers and clamped to at least this value.
    """

    def __init__(self, min_length: int = 1):
        self.min_length = min_length

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=float).ravel()
        if x.size == 0 or np.any(x <= 0):
            raise ValueError("lengths must be a non-empty array of positive values")
        xs = np.sort(x)
        return self._set(nearest_rank(xs, 50), nearest_rank(xs, 99))

    @classmethod
    def from_quantiles(cls, median: float, p99: float, min_length: int = 1) -> "LogNormalLengths":
        return cls(min_length=min_length)._set(median, p99)

    def _set(self, median, p99):
        if median <= 0 or p99 <= 0:
            raise InfeasibleProfile("median and P99 must be positive")
        if p99 < median:
            raise InfeasibleProfile(f"P99 ({p99}) below median ({median})")
        self.mu_ = math.log(median)
        self.sigma_ = (math.log(p99) - self.mu_) / Z99
        self.iqr_ = math.exp(self.mu_ + Z75 * self.sigma_) - math.exp(self.mu_ - Z75 * self.sigma_)
        return self

    def quantile(self, q):
        check_is_fitted(self, "mu_")
        return np.exp(self.mu_ + self.sigma_ * norm.ppf(q))

    def sample(self, n: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "mu_")
        rng = np.random.default_rng(random_state)
        if self.sigma_ == 0:
            draws = np.full(n, math.exp(self.mu_))
        else:
            draws = rng.lognormal(self.mu_, self.sigma_, size=n)
        return np.maximum(np.rint(draws), self.min_length).astype(np.int64)


def _resolve_profile(profile) -> TraceStats:
    if isinstance(profile, TraceStats):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise KeyError(f"unknown profile {profile!r}; built-ins: {sorted(PROFILES)}") from None


def synthesize(profile, count: int, seed: int, filter: Optional[LengthFilter] = None) -> list:
    """Draw ``count`` requests (lengths only) from a named profile or TraceStats.

    With a filter, rows it rejects are redrawn so exactly ``count`` requests
    come back.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    stats = _resolve_profile(profile)
    pre = LogNormalLengths.from_quantiles(stats.prefill.median, stats.prefill.p99)
    dec = LogNormalLengths.from_quantiles(stats.decode.median, stats.decode.p99)
    rng = rng_stream(seed, "workload")
    out = []
    rounds = 0
    while len(out) < count:
        need = count - len(out)
        p = pre.sample(need, rng)
        d = dec.sample(need, rng)
        for np_, nd in zip(p.tolist(), d.tolist()):
            if filter is None or filter.accepts(np_, nd):
                out.append(RequestSpec(id=f"r{len(out):06d}", prompt_tokens=np_, decode_tokens=nd))
        rounds += 1
        if rounds > 1000:
            raise EmptyAfterFilter("filter rejects nearly every synthesized request")
    return out


def fit_diagnostics(profile, n: int = 100_000, seed: int = 0) -> dict:
    """Achieved median/IQR/P99 of a synthesized sample next to the profile targets."""
    stats = _resolve_profile(profile)
    reqs = synthesize(stats, n, seed)
    report = {}
    for phase, target, vals in (
        ("prefill", stats.prefill, [r.prompt_tokens for r in reqs]),
        ("decode", stats.decode, [r.decode_tokens for r in reqs]),
    ):
        xs = np.sort(np.asarray(vals))
        q25, q75 = nearest_rank(xs, 25), nearest_rank(xs, 75)
        report[phase] = {
            "target": {"median": target.median, "iqr": target.iqr, "p99": target.p99},
            "achieved": {"median": float(nearest_rank(xs, 50)), "iqr": float(q75 - q25),
                         "p99": float(nearest_rank(xs, 99))},
        }
    return report


def load_trace(path, filter: Optional[LengthFilter] = None, stats: Optional[dict] = None) -> list:
    """Read a JSONL trace of ``{arrival_s?, prompt_tokens, decode_tokens, prompt_text?}`` rows.

    Blank lines are skipped. Rows rejected by ``filter`` are dropped; the
    count is logged and written to ``stats["dropped"]`` when a dict is passed.
    """
    out, dropped = [], 0
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("row is not an object")
                p, d = row["prompt_tokens"], row["decode_tokens"]
                if not (isinstance(p, int) and isinstance(d, int)) or isinstance(p, bool) or isinstance(d, bool):
                    raise ValueError("token counts must be integers")
                arrival = row.get("arrival_s")
                spec = RequestSpec(
                    id=str(row.get("id", f"t{lineno:06d}")), prompt_tokens=p, decode_tokens=d,
                    arrival_time=None if arrival is None else float(arrival),
                    prompt_text=row.get("prompt_text"))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            if filter is not None and not filter.accepts(p, d):
                dropped += 1
                continue
            out.append(spec)
    if dropped:
        logger.info("load_trace: dropped %d rows outside %s", dropped, filter)
    if stats is not None:
        stats["dropped"] = dropped
        stats["kept"] = len(out)
    if not out:
        raise EmptyAfterFilter(f"{path}: no requests left after filtering")
    return out


def save_trace(requests: Sequence[RequestSpec], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in requests:
            row = {"id": r.id, "prompt_tokens": r.prompt_tokens, "decode_tokens": r.decode_tokens}
            if r.arrival_time is not None:
                row["arrival_s"] = r.arrival_time
            if r.prompt_text is not None:
                row["prompt_text"] = r.prompt_text
            fh.write(json.dumps(row) + "\n")
    return path


def assign_arrivals(specs: Sequence[RequestSpec], arrival: str, qps: Optional[float] = None,
                    seed: int = 0) -> list:
    """Stamp arrival times: ``poisson`` (exponential gaps), ``uniform`` or ``trace_timestamps``.

    Generated arrivals are running sums of the gaps, starting at 0.
    """
    if arrival == "trace_timestamps":
        missing = [s.id for s in specs if s.arrival_time is None]
        if missing:
            raise MissingTimestamps(f"{len(missing)} requests lack arrival_s (first: {missing[0]})")
        return list(specs)
    if qps is None or not qps > 0:
        raise ValueError(f"qps must be > 0, got {qps!r}")
    n = len(specs)
    if arrival == "poisson":
        gaps = rng_stream(seed, "arrivals").exponential(1.0 / qps, size=max(n - 1, 0))
    elif arrival == "uniform":
        gaps = np.full(max(n - 1, 0), 1.0 / qps)
    else:
        raise ValueError(f"unknown arrival process {arrival!r}")
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    return [s.with_arrival(float(t)) for s, t in zip(specs, times)]
