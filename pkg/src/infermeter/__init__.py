"""Evaluation harness and deterministic serving simulator for LLM inference endpoints."""

__version__ = "0.1.0"

from .core import RequestSpec, RunRecord, TokenTimeline, validate_timeline
from .deadline import DeadlinePolicy, PrefillCurve, PrefillFit, make_deadlines, profile_prefill
from .metrics import DeadlineSpec, DistributionSummary, RequestMetrics, compute_request_metrics, fluidity_index, summarize
from .report import RunReport, build_report, compare, export
from .search import SloSpec, capacity_search, fluid_rate_search, parse_slo
from .simengine import LatencyModelConfig, PolicyConfig, serve_mock, simulate
from .workload import PROFILES, LogNormalLengths, TraceStats, assign_arrivals, load_trace, synthesize

__all__ = [
    "RequestSpec", "RunRecord", "TokenTimeline", "validate_timeline",
    "DeadlinePolicy", "PrefillCurve", "PrefillFit", "make_deadlines", "profile_prefill",
    "DeadlineSpec", "DistributionSummary", "RequestMetrics", "compute_request_metrics", "fluidity_index",
    "summarize",
    "RunReport", "build_report", "compare", "export",
    "SloSpec", "capacity_search", "fluid_rate_search", "parse_slo",
    "LatencyModelConfig", "PolicyConfig", "serve_mock", "simulate",
    "PROFILES", "LogNormalLengths", "TraceStats", "assign_arrivals", "load_trace", "synthesize",
]
