"""Run aggregation, anti-pattern lints, multi-run comparison and exports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .core import RunRecord
from .deadline import DeadlinePolicy, make_deadlines
from .metrics import DistributionSummary, compute_request_metrics, nearest_rank, summarize
from .search import SloSpec, attainment_fraction

__all__ = [
    "LintConfig",
    "LintFinding",
    "RunReport",
    "Comparison",
    "NoFinishedRequests",
    "WorkloadMismatch",
    "build_report",
    "compare",
    "export",
    "METRICS",
    "HEADLINE_PERCENTILES",
    "MANUAL_CHECKLIST",
]

SCHEMA_VERSION = "infermeter.report/1"

HEADLINE_PERCENTILES = (50, 90, 99)

# metric key -> RequestMetrics attribute (tbt is pooled over gaps)
METRICS = {
    "ttft": "ttft_s",
    "ttlt": "ttlt_s",
    "tbt": "tbt_s",
    "tpot": "tpot_s",
    "normalized_latency": "normalized_latency_s_per_token",
    "scheduling_delay": "scheduling_delay_s",
    "prefill_time": "prefill_time_s",
    "fluidity": "fluidity_index",
}

MANUAL_CHECKLIST = (
    "AP1: are baselines configured and tuned as fairly as the proposed system?",
    "AP2: are the model, hardware and parallelism setup representative of deployment?",
    "AP3: do memory settings (KV-cache budget, batch caps) match production constraints?",
    "AP4: is the evaluation run on more than one workload source?",
    "AP6: are metrics chosen to match the application's latency priorities?",
)


class NoFinishedRequests(ValueError):
    pass


class WorkloadMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LintConfig:
    ttft_practical_bound_s: float = 10.0
    tbt_practical_bound_s: float = 1.0
    scheduling_delay_mask_s: float = 1.0
    stall_factor: float = 5.0
    stall_floor_s: float = 1.0


@dataclass
class LintFinding:
    rule_id: str
    severity: str
    message: str
    evidence: dict = field(default_factory=dict)


@dataclass
class RunReport:
    summaries: dict
    slo_attainment: Optional[float]
    lints: list
    workload_fingerprint: str
    config_fingerprint: str
    requests: list
    n_included: int
    n_excluded: int
    n_failed: int
    tokens_requested: int
    tokens_generated: int
    tbt_granularity: str
    stall_count: int
    label: str = ""
    headline_metrics: tuple = ()
    slo: Optional[dict] = None
    deadlines: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    schema: str = SCHEMA_VERSION

    @property
    def tokens_conserved(self) -> bool:
        return self.tokens_requested == self.tokens_generated

    def summary(self, metric: str) -> DistributionSummary:
        return self.summaries[metric]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summaries"] = {k: v.to_dict() for k, v in self.summaries.items()}
        d["headline_metrics"] = list(self.headline_metrics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["summaries"] = {k: DistributionSummary.from_dict(v) for k, v in d["summaries"].items()}
        d["lints"] = [LintFinding(**f) for f in d["lints"]]
        d["headline_metrics"] = tuple(d.get("headline_metrics", ()))
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_text(self) -> str:
        lines = [f"run {self.label or self.config_fingerprint}  workload {self.workload_fingerprint}",
                 f"requests: {self.n_included} included, {self.n_excluded} outside warmup/cooldown, "
                 f"{self.n_failed} failed",
                 f"tokens: requested {self.tokens_requested}, generated {self.tokens_generated}"
                 f"{'' if self.tokens_conserved else '  (MISMATCH)'}"]
        if self.tbt_granularity == "event":
            lines.append("note: TBT measured per SSE event; provider did not report per-event token counts")
        if self.slo_attainment is not None:
            lines.append(f"SLO attainment: {self.slo_attainment:.4f}")
        lines.append(f"stalls: {self.stall_count}")
        keys = sorted({k for s in self.summaries.values() for k in s.percentiles}, key=float)
        header = f"{'metric':<20}{'n':>8}{'mean':>12}" + "".join(f"{'p' + str(k):>12}" for k in keys)
        lines.append(header)
        for name in self.headline_metrics:
            s = self.summaries.get(name)
            if s is None:
                continue
            row = f"{name:<20}{s.count:>8}{s.mean:>12.5g}"
            row += "".join(f"{s.percentiles[k]:>12.5g}" if k in s.percentiles else f"{'':>12}" for k in keys)
            lines.append(row)
        for f in self.lints:
            lines.append(f"[{f.severity.upper()}] {f.rule_id}: {f.message}")
        return "\n".join(lines)


def _included(run: RunRecord):
    reqs = run.request_map()
    inc, excluded, failed = [], 0, 0
    for t in run.timelines:
        if not t.finished or t.finish_reason == "error" or not t.token_times:
            failed += 1
            continue
        if t.finish_time < run.warmup_cutoff or t.submit_time > run.cooldown_cutoff:
            excluded += 1
            continue
        inc.append((t, reqs[t.request_id]))
    return inc, excluded, failed


def build_report(run: RunRecord, deadlines: DeadlinePolicy, slo: Optional[SloSpec] = None,
                 percentiles: Sequence[float] = (50, 90, 95, 99), headline_metrics: Optional[Sequence[str]] = None,
                 single_statistic: bool = False, lint_config: LintConfig = LintConfig(),
                 label: str = "") -> RunReport:
    """Aggregate a run into distribution summaries, SLO attainment and lint findings.

    Requests that finished before the warmup cutoff or were submitted after
    the cooldown cutoff are left out of every aggregate. P50/P90/P99 are
    always reported unless ``single_statistic`` is set, which raises L1.
    """
    inc, excluded, failed = _included(run)
    if not inc:
        raise NoFinishedRequests("no finished requests inside the measurement window")
    percentiles = list(percentiles)
    if single_statistic:
        pcts = percentiles[:1]
    else:
        pcts = sorted(set(percentiles) | set(HEADLINE_PERCENTILES), key=float)

    rows, metrics = [], []
    for t, spec in inc:
        d = make_deadlines(deadlines, spec)
        m = compute_request_metrics(t, spec, d)
        metrics.append(m)
        row = m.to_row()
        row.update(prompt_tokens=spec.prompt_tokens, decode_tokens_requested=spec.decode_tokens,
                   prefill_deadline_s=d.prefill_deadline_s, reported_tokens=t.reported_tokens)
        rows.append(row)

    summaries = {}
    for key, attr in METRICS.items():
        if key == "tbt":
            vals = [g for m in metrics for g in m.tbt_s]
        else:
            vals = [getattr(m, attr) for m in metrics if getattr(m, attr) is not None]
        if vals:
            summaries[key] = summarize(vals, pcts, keep_cdf=True)

    headline = tuple(headline_metrics) if headline_metrics is not None else tuple(
        k for k in METRICS if k in summaries)
    conservation_rows = [(t, s) for t, s in inc if t.finish_reason == "length"]
    stall_s = max(lint_config.stall_factor * deadlines.decode_deadline_s, lint_config.stall_floor_s)
    stall_count = sum(1 for m in metrics for g in m.tbt_s if g > stall_s)

    report = RunReport(
        summaries=summaries,
        slo_attainment=attainment_fraction(metrics, slo) if slo is not None else None,
        lints=[],
        workload_fingerprint=run.workload_fingerprint,
        config_fingerprint=run.config_fingerprint,
        requests=rows,
        n_included=len(inc), n_excluded=excluded, n_failed=failed,
        tokens_requested=sum(s.decode_tokens for _, s in conservation_rows),
        tokens_generated=sum(t.n_tokens for t, _ in conservation_rows),
        tbt_granularity="token" if all(t.usage_reported for t, _ in inc) else "event",
        stall_count=stall_count, label=label, headline_metrics=headline,
        slo=slo.to_dict() if slo is not None else None, deadlines=deadlines.to_dict(),
        extra={"stall_threshold_s": stall_s, "percentiles_requested": percentiles,
               "seed": run.seed, "meta": run.meta})
    report.lints = lint_report(report, metrics, single_statistic or len(percentiles) == 1, lint_config)
    return report


def lint_report(report: RunReport, metrics, single_statistic: bool, cfg: LintConfig) -> list:
    findings = []
    if single_statistic:
        findings.append(LintFinding(
            "L1", "warn", "summary-only output requested; report the distribution (CDF or P50/P90/P99)",
            {"percentiles_requested": report.extra["percentiles_requested"]}))

    delays = sorted(m.scheduling_delay_s for m in metrics if m.scheduling_delay_s is not None)
    if delays and "normalized_latency" in report.headline_metrics:
        p50_ts = nearest_rank(delays, 50)
        if p50_ts > cfg.scheduling_delay_mask_s:
            norm = sorted(m.normalized_latency_s_per_token for m in metrics)
            findings.append(LintFinding(
                "L2", "fail",
                "normalization masks scheduling delay: per-token normalized latency hides the fixed wait "
                "before execution; report scheduling delay and TTFT directly",
                {"p50_scheduling_delay_s": p50_ts,
                 "fraction_delay_above_threshold": sum(d > cfg.scheduling_delay_mask_s for d in delays) / len(delays),
                 "p50_normalized_latency_s_per_token": nearest_rank(norm, 50),
                 "threshold_s": cfg.scheduling_delay_mask_s}))

    ttft = sorted(m.ttft_s for m in metrics)
    tbt = sorted(g for m in metrics for g in m.tbt_s)
    p99_ttft = nearest_rank(ttft, 99)
    p99_tbt = nearest_rank(tbt, 99) if tbt else None
    if p99_ttft > cfg.ttft_practical_bound_s or (p99_tbt is not None and p99_tbt > cfg.tbt_practical_bound_s):
        findings.append(LintFinding(
            "L3", "fail", "impractical operating point: tail latency beyond what interactive users tolerate",
            {"p99_ttft_s": p99_ttft, "p99_tbt_s": p99_tbt,
             "ttft_bound_s": cfg.ttft_practical_bound_s, "tbt_bound_s": cfg.tbt_practical_bound_s}))
    return findings


STATS = ("mean", 50, 90, 99)


def _stat(s: DistributionSummary, stat):
    if stat == "mean":
        return s.mean
    return s.percentiles.get(stat)


def _ratio(v, base):
    if v is None or base is None:
        return None
    if base == 0:
        return 1.0 if v == 0 else None
    return v / base


@dataclass
class Comparison:
    labels: list
    baseline_index: int
    rows: list
    flags: list
    lints: list
    workload_fingerprint: str

    def ratio(self, run_index: int, metric: str, stat) -> Optional[float]:
        for r in self.rows:
            if r["run"] == run_index and r["metric"] == metric and r["stat"] == stat:
                return r["ratio"]
        raise KeyError((run_index, metric, stat))

    def to_dict(self) -> dict:
        return {"labels": self.labels, "baseline_index": self.baseline_index, "rows": self.rows,
                "flags": self.flags, "lints": [asdict(f) for f in self.lints],
                "workload_fingerprint": self.workload_fingerprint}

    def to_text(self) -> str:
        base = self.labels[self.baseline_index]
        out = [f"baseline: {base}"]
        out.append(f"{'metric':<20}{'stat':>6}" + "".join(f"{lab[:14]:>16}" for lab in self.labels))
        metrics = list(dict.fromkeys(r["metric"] for r in self.rows))
        for m in metrics:
            for st in STATS:
                cells = []
                for i in range(len(self.labels)):
                    r = next((r for r in self.rows if r["run"] == i and r["metric"] == m and r["stat"] == st), None)
                    if r is None or r["ratio"] is None:
                        cells.append(f"{'-':>16}")
                    else:
                        cells.append(f"{r['value']:>9.4g} x{r['ratio']:<5.3g}")
                out.append(f"{m:<20}{'p' + str(st) if st != 'mean' else 'mean':>6}" + "".join(cells))
        for f in self.flags:
            out.append(f"[TRADE-OFF] {f['label']} {f['metric']}: {f['message']}")
        for f in self.lints:
            out.append(f"[{f.severity.upper()}] {f.rule_id}: {f.message}")
        return "\n".join(out)


def compare(reports: Sequence[RunReport], baseline_index: int = 0) -> Comparison:
    """Ratio of every metric statistic against the baseline run.

    A metric whose median moves one way while its P99 moves the other is
    flagged as a distributional trade-off.
    """
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    fps = {r.workload_fingerprint for r in reports}
    if len(fps) != 1:
        raise WorkloadMismatch(f"reports cover different workloads: {sorted(fps)}")
    base = reports[baseline_index]
    labels = [r.label or f"run{i}" for i, r in enumerate(reports)]
    rows, flags = [], []
    for i, rep in enumerate(reports):
        for metric, s in rep.summaries.items():
            b = base.summaries.get(metric)
            if b is None:
                continue
            for st in STATS:
                v, bv = _stat(s, st), _stat(b, st)
                rows.append({"run": i, "metric": metric, "stat": st, "value": v, "baseline": bv,
                             "ratio": _ratio(v, bv)})
            if i == baseline_index:
                continue
            r50, r99 = _ratio(_stat(s, 50), _stat(b, 50)), _ratio(_stat(s, 99), _stat(b, 99))
            if r50 is not None and r99 is not None and (r50 - 1) * (r99 - 1) < 0:
                better = "median" if r50 < 1 else "P99"
                flags.append({"run": i, "label": labels[i], "metric": metric, "kind": "distributional trade-off",
                              "median_ratio": r50, "p99_ratio": r99,
                              "message": f"distributional trade-off: median x{r50:.3g}, P99 x{r99:.3g} "
                                         f"({better} lower than {labels[baseline_index]})"})
    lints = [LintFinding("L4", "warn",
                         "single-workload evaluation: every compared run uses the same workload; "
                         "repeat on other workload sources before generalizing",
                         {"workload_fingerprint": base.workload_fingerprint, "runs": len(reports)})]
    return Comparison(labels, baseline_index, rows, flags, lints, base.workload_fingerprint)


def _svg_cdf(path: Path, series: dict, metric: str, unit: str = "s") -> Path:
    w, h, pad = 640, 400, 56
    allv = [v for vals in series.values() for v in vals]
    lo, hi = min(allv), max(allv)
    if hi == lo:
        hi = lo + 1.0
    sx = lambda v: pad + (v - lo) / (hi - lo) * (w - 2 * pad)
    sy = lambda q: h - pad - q * (h - 2 * pad)
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w / 2}" y="{h - 16}" text-anchor="middle" font-size="13">{escape(metric)} ({unit})</text>',
             f'<text x="{pad - 8}" y="{pad}" text-anchor="end" font-size="11">1.0</text>',
             f'<text x="{pad - 8}" y="{h - pad}" text-anchor="end" font-size="11">0.0</text>',
             f'<text x="{pad}" y="{h - pad + 16}" text-anchor="middle" font-size="11">{lo:.4g}</text>',
             f'<text x="{w - pad}" y="{h - pad + 16}" text-anchor="middle" font-size="11">{hi:.4g}</text>']
    for k, (label, vals) in enumerate(series.items()):
        n = len(vals)
        pts = [f"M{sx(vals[0]):.2f},{sy(0):.2f}"]
        for i, v in enumerate(vals):
            pts.append(f"L{sx(v):.2f},{sy(i / n):.2f}L{sx(v):.2f},{sy((i + 1) / n):.2f}")
        color = colors[k % len(colors)]
        parts.append(f'<path d="{"".join(pts)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{w - pad}" y="{pad + 16 * k}" text-anchor="end" font-size="12" '
                     f'fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def export(report, out_dir, formats=("json", "csv", "svg"), prefix: str = "report") -> list:
    """Write a RunReport (or a list of reports compared against each other) to ``out_dir``.

    json: the full report. csv: one row per request plus one ``cdf_<metric>.csv``
    per metric with one row per sample. svg: one CDF plot per metric, one
    curve per run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = list(report) if isinstance(report, (list, tuple)) else [report]
    unknown = set(formats) - {"json", "csv", "svg"}
    if unknown:
        raise ValueError(f"unknown export formats {sorted(unknown)}")
    written = []
    multi = len(reports) > 1
    for i, rep in enumerate(reports):
        tag = f"{prefix}_{rep.label or i}" if multi else prefix
        if "json" in formats:
            written.append(rep.save(out / f"{tag}.json"))
        if "csv" in formats:
            written.append(_write_requests_csv(rep, out / f"{tag}_requests.csv"))
            for metric, s in rep.summaries.items():
                p = out / f"{tag}_cdf_{metric}.csv"
                with p.open("w", newline="") as fh:
                    wr = csv.writer(fh)
                    wr.writerow(["value", "cumulative_fraction"])
                    n = len(s.cdf_points or ())
                    for k, v in enumerate(s.cdf_points or ()):
                        wr.writerow([repr(v), (k + 1) / n])
                written.append(p)
    if "svg" in formats:
        metrics = [m for m in METRICS if all(m in r.summaries and r.summaries[m].cdf_points for r in reports)]
        for metric in metrics:
            series = {(r.label or f"run{i}"): r.summaries[metric].cdf_points for i, r in enumerate(reports)}
            unit = "" if metric == "fluidity" else ("s/token" if metric == "normalized_latency" else "s")
            written.append(_svg_cdf(out / f"{prefix}_cdf_{metric}.svg", series, metric, unit))
    if multi and "json" in formats:
        p = out / f"{prefix}_comparison.json"
        p.write_text(json.dumps(compare(reports).to_dict(), indent=1) + "\n")
        written.append(p)
    return written


def _write_requests_csv(rep: RunReport, path: Path) -> Path:
    cols = ["request_id", "prompt_tokens", "decode_tokens_requested", "n_tokens", "reported_tokens",
            "ttft_s", "ttlt_s", "scheduling_delay_s", "prefill_time_s", "decode_time_s", "tpot_s",
            "max_tbt_s", "normalized_latency_s_per_token", "prefill_deadline_s", "fluidity_index",
            "deadlines_met", "deadlines_missed"]
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        wr.writeheader()
        for row in rep.requests:
            wr.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})
    return path
