"""SLO attainment, adaptive capacity search and fluid token-rate search."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .core import TokenTimeline
from .metrics import DeadlineSpec, RequestMetrics, _fluidity, nearest_rank

__all__ = [
    "SloSpec",
    "parse_slo",
    "SloSyntaxError",
    "request_attains",
    "attainment_fraction",
    "Probe",
    "CapacityResult",
    "InfeasibleAtFloor",
    "InfeasibleAtCeiling",
    "capacity_search",
    "FluidRateResult",
    "fluid_rate_search",
    "max_probes",
]

logger = logging.getLogger(__name__)

MAX_DOUBLINGS = 20


class InfeasibleAtFloor(RuntimeError):
    pass


class InfeasibleAtCeiling(RuntimeError):
    pass


class SloSyntaxError(ValueError):
    pass


@dataclass(frozen=True)
class SloSpec:
    """Per-request bounds plus the fraction of requests that must meet all of them.

    A request attains when its TTFT, its own ``percentile``-th TBT and its
    fluidity index are all within bounds. ``attainment_target`` defaults to
    ``percentile / 100``.
    """

    percentile: float = 99.0
    ttft_bound_s: Optional[float] = None
    tbt_bound_s: Optional[float] = None
    fluidity_threshold: Optional[float] = None
    attainment_target: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        if self.ttft_bound_s is None and self.tbt_bound_s is None and self.fluidity_threshold is None:
            raise ValueError("an SLO needs at least one bound")
        if self.fluidity_threshold is not None and not 0 <= self.fluidity_threshold <= 1:
            raise ValueError("fluidity_threshold must lie in [0, 1]")
        if self.attainment_target is not None and not 0 < self.attainment_target <= 1:
            raise ValueError("attainment_target must lie in (0, 1]")

    @property
    def target(self) -> float:
        return self.attainment_target if self.attainment_target is not None else self.percentile / 100

    def to_dict(self) -> dict:
        return {"percentile": self.percentile, "ttft_bound_s": self.ttft_bound_s,
                "tbt_bound_s": self.tbt_bound_s, "fluidity_threshold": self.fluidity_threshold,
                "attainment_target": self.attainment_target}

    @classmethod
    def from_dict(cls, d: dict) -> "SloSpec":
        return cls(**d)


_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "": 1.0}
_CLAUSE = re.compile(r"^(ttft|tbt|fluidity)(<=|>=|<|>)([0-9]*\.?[0-9]+(?:e-?[0-9]+)?)(ms|us|s)?$")


def parse_slo(text: str) -> SloSpec:
    """Parse the SLO mini-language.

    ``[pNN] clause [clause ...] [@fraction]`` where a clause is
    ``ttft<2s``, ``tbt<200ms`` or ``fluidity>0.9``, and ``@0.99`` sets the
    attainment target. Example: ``"p99 ttft<2s fluidity>0.9@0.99"``.
    """
    src = text.strip()
    target = None
    if "@" in src:
        src, _, tail = src.rpartition("@")
        try:
            target = float(tail)
        except ValueError:
            raise SloSyntaxError(f"bad attainment target {tail!r}") from None
    percentile = 99.0
    kw = {}
    for tok in src.replace(",", " ").split():
        m = re.fullmatch(r"p([0-9]+(?:\.[0-9]+)?)", tok)
        if m:
            percentile = float(m.group(1))
            continue
        m = _CLAUSE.match(tok)
        if not m:
            raise SloSyntaxError(f"cannot parse SLO clause {tok!r}")
        metric, op, num, unit = m.groups()
        value = float(num)
        if metric == "fluidity":
            if op[0] != ">" or unit:
                raise SloSyntaxError("fluidity takes a unitless lower bound, e.g. fluidity>0.9")
            kw["fluidity_threshold"] = value
        else:
            if op[0] != "<":
                raise SloSyntaxError(f"{metric} takes an upper bound, e.g. {metric}<2s")
            kw[f"{metric}_bound_s"] = value * _UNITS[unit or ""]
    try:
        return SloSpec(percentile=percentile, attainment_target=target, **kw)
    except ValueError as exc:
        raise SloSyntaxError(str(exc)) from exc


def request_attains(m: RequestMetrics, slo: SloSpec) -> bool:
    if slo.ttft_bound_s is not None and m.ttft_s > slo.ttft_bound_s:
        return False
    if slo.tbt_bound_s is not None and m.tbt_s:
        if nearest_rank(sorted(m.tbt_s), slo.percentile) > slo.tbt_bound_s:
            return False
    if slo.fluidity_threshold is not None and m.fluidity_index < slo.fluidity_threshold:
        return False
    return True


def attainment_fraction(metrics: Sequence[RequestMetrics], slo: SloSpec) -> float:
    if not metrics:
        return 0.0
    return sum(request_attains(m, slo) for m in metrics) / len(metrics)


@dataclass
class Probe:
    qps: float
    attained: bool
    summary: dict = field(default_factory=dict)


@dataclass
class CapacityResult:
    max_qps: float
    probes: list
    tolerance_rel: float
    seed: Optional[int] = None
    unbounded: bool = False
    nonmonotone: bool = False

    def to_dict(self) -> dict:
        return {"max_qps": self.max_qps, "tolerance_rel": self.tolerance_rel, "seed": self.seed,
                "unbounded": self.unbounded, "nonmonotone": self.nonmonotone,
                "probes": [{"qps": p.qps, "attained": p.attained, "summary": p.summary} for p in self.probes]}


def max_probes(q_lo: float, q_hi: float, tol_rel: float) -> int:
    """Probe budget ``20 + ceil(log2(range / tol))`` with range ``q_hi - q_lo`` and tol ``tol_rel * q_lo``."""
    return MAX_DOUBLINGS + math.ceil(math.log2(max((q_hi - q_lo) / (tol_rel * q_lo), 1.0)))


def capacity_search(evaluate: Callable, slo: Optional[SloSpec] = None, q_lo: float = 0.1,
                    q_hi_seed: float = 1.0, tol_rel: float = 0.05, repetitions: int = 1,
                    seed: Optional[int] = None) -> CapacityResult:
    """Largest request rate at which ``evaluate`` still attains the SLO.

    ``evaluate(qps)`` returns either a bool, a ``(bool, summary_dict)`` pair,
    or a sequence of :class:`RequestMetrics` that is judged against ``slo``.
    The rate is doubled from ``q_hi_seed`` until a probe fails (at most 20
    doublings), then the bracket is bisected until ``(hi - lo) / lo <= tol_rel``.
    A probe attains only if all ``repetitions`` runs attain.
    """
    if not 0 < q_lo < q_hi_seed:
        raise ValueError("need 0 < q_lo < q_hi_seed")
    if tol_rel <= 0:
        raise ValueError("tol_rel must be > 0")
    probes: list = []

    def probe(q: float) -> bool:
        ok, summary = True, {}
        for _ in range(repetitions):
            out = evaluate(q)
            if isinstance(out, tuple):
                out, summary = out
            if not isinstance(out, (bool, int)):
                if slo is None:
                    raise ValueError("an SloSpec is needed to judge per-request metrics")
                frac = attainment_fraction(out, slo)
                summary = {"attainment": frac, "n": len(out)}
                out = frac >= slo.target
            ok = ok and bool(out)
            if not ok:
                break
        probes.append(Probe(q, ok, summary))
        logger.info("capacity probe qps=%.4g attained=%s", q, ok)
        return ok

    if not probe(q_lo):
        raise InfeasibleAtFloor(f"SLO not attained at the floor rate {q_lo}")
    lo, hi = q_lo, q_hi_seed
    unbounded = True
    for _ in range(MAX_DOUBLINGS):
        if probe(hi):
            lo, hi = hi, hi * 2
        else:
            unbounded = False
            break
    if unbounded:
        logger.warning("capacity unbounded within search range (attained up to %.4g qps)", lo)
    else:
        while (hi - lo) / lo > tol_rel:
            mid = 0.5 * (lo + hi)
            if probe(mid):
                lo = mid
            else:
                hi = mid

    lowest_fail = min((p.qps for p in probes if not p.attained), default=math.inf)
    nonmonotone = any(p.attained and p.qps > lowest_fail for p in probes)
    if nonmonotone:
        logger.warning("non-monotone attainment observed; capping at the lowest failing rate %.4g", lowest_fail)
    max_qps = max(p.qps for p in probes if p.attained and p.qps < lowest_fail)
    return CapacityResult(max_qps=max_qps, probes=probes, tolerance_rel=tol_rel, seed=seed,
                          unbounded=unbounded, nonmonotone=nonmonotone)


@dataclass
class FluidRateResult:
    decode_deadline_s: float
    rate_tokens_per_s: float
    evaluations: int

    def __iter__(self):
        return iter((self.decode_deadline_s, self.rate_tokens_per_s))


def _fluidity_requirement_met(arrivals, prefill_deadlines, dd, percentile, threshold) -> bool:
    ok = 0
    for arr, dp in zip(arrivals, prefill_deadlines):
        fl, _, _ = _fluidity(arr, DeadlineSpec(dp, dd))
        ok += fl >= threshold
    return ok / len(arrivals) >= percentile / 100


def fluid_rate_search(timelines: Sequence[TokenTimeline], prefill_deadlines, percentile: float = 99.0,
                      fluidity_threshold: float = 0.9, dd_lo: float = 1e-4, dd_hi: float = 1.0,
                      tol_rel: float = 0.01) -> FluidRateResult:
    """Smallest decode deadline at which ``percentile``% of requests reach the fluidity threshold.

    ``prefill_deadlines`` holds one prefill deadline per timeline (or a
    scalar, or a callable of the timeline) and stays fixed while the decode
    deadline is bisected. The recorded timelines are re-scored, never re-run.
    The returned rate is ``1 / deadline`` tokens per second.
    """
    if not 0 < dd_lo < dd_hi:
        raise ValueError("need 0 < dd_lo < dd_hi")
    tls = [t for t in timelines if t.finished and t.token_times]
    if not tls:
        raise ValueError("no finished timelines to evaluate")
    if callable(prefill_deadlines):
        dps = [float(prefill_deadlines(t)) for t in tls]
    elif isinstance(prefill_deadlines, (int, float)):
        dps = [float(prefill_deadlines)] * len(tls)
    else:
        dps = [float(x) for x, t in zip(prefill_deadlines, timelines) if t.finished and t.token_times]
    arrivals = [t.token_arrivals() - t.submit_time for t in tls]
    evals = 0

    def ok(dd):
        nonlocal evals
        evals += 1
        return _fluidity_requirement_met(arrivals, dps, dd, percentile, fluidity_threshold)

    if not ok(dd_hi):
        raise InfeasibleAtCeiling(f"fluidity requirement not met even at D_d={dd_hi}s")
    if ok(dd_lo):
        return FluidRateResult(dd_lo, 1.0 / dd_lo, evals)
    lo, hi = dd_lo, dd_hi
    while (hi - lo) / lo > tol_rel:
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return FluidRateResult(hi, 1.0 / hi, evals)
