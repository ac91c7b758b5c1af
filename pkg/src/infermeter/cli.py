"""``infermeter`` command line: simulate, bench, serve-mock, profile-prefill, capacity,
fluid-rate, report, compare, replay."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .client import EndpointConfig, run_load
from .core import RunRecord
from .deadline import DEFAULT_PROFILE_LENGTHS, DeadlinePolicy, PrefillFit, make_deadlines, profile_prefill
from .metrics import compute_request_metrics
from .report import LintConfig, RunReport, build_report, compare, export
from .search import capacity_search, fluid_rate_search, parse_slo
from .simengine import LatencyModelConfig, PolicyConfig, serve_mock, simulate
from .workload import (PROFILES, SHORT_CONTEXT_FILTER, LengthFilter, assign_arrivals, load_trace,
                       synthesize)

logger = logging.getLogger("infermeter")

EXIT_OK, EXIT_LINT, EXIT_ERROR = 0, 1, 2


# --------------------------------------------------------------------------- arguments

def _add_workload(p):
    g = p.add_argument_group("workload")
    g.add_argument("--workload", default="profile:azure-conv-2024",
                   help="profile:<name> (built-ins: %s) or trace:<path.jsonl>" % ", ".join(sorted(PROFILES)))
    g.add_argument("--count", type=int, default=1000, help="requests to synthesize or keep from a trace")
    g.add_argument("--qps", type=float, default=1.0, help="mean arrival rate (requests/s)")
    g.add_argument("--arrival", choices=("poisson", "uniform", "trace_timestamps"), default="poisson")
    g.add_argument("--filter", choices=("none", "short-context"), default="none",
                   help="short-context keeps prefill < 16K and decode < 1K tokens")
    g.add_argument("--max-prefill", type=int, help="drop requests with more prompt tokens")
    g.add_argument("--max-decode", type=int, help="drop requests with more decode tokens")


def _add_policy(p):
    g = p.add_argument_group("simulated engine")
    g.add_argument("--config", type=Path, help="PolicyConfig JSON file")
    g.add_argument("--policy", help="prefill_priority | chunked_prefill | speculative (aliases: prefill, chunked, spec)")


def _add_deadlines(p):
    g = p.add_argument_group("deadlines")
    g.add_argument("--prefill-fit", type=Path, help="PrefillFit JSON from profile-prefill")
    g.add_argument("--slack", type=float, default=0.5, help="scheduling slack added to the prefill baseline (s)")
    g.add_argument("--decode-deadline", type=float, default=0.05, help="per-token deadline D_d (s)")


def _add_report(p):
    g = p.add_argument_group("report")
    g.add_argument("--slo", help='SLO expression, e.g. "p99 ttft<2s fluidity>0.9@0.99"')
    g.add_argument("--percentiles", default="50,90,95,99")
    g.add_argument("--single-statistic", action="store_true",
                   help="report only the first requested percentile (raises lint L1)")
    g.add_argument("--headline", help="comma-separated headline metrics (default: all)")
    g.add_argument("--ttft-bound", type=float, default=10.0, help="practical P99 TTFT bound for lint L3 (s)")
    g.add_argument("--tbt-bound", type=float, default=1.0, help="practical P99 TBT bound for lint L3 (s)")
    g.add_argument("--formats", default="json,csv,svg")
    g.add_argument("--strict", action="store_true", help="exit 1 when a lint finding has severity fail")


def _add_endpoint(p):
    g = p.add_argument_group("endpoint")
    g.add_argument("--base-url", required=True)
    g.add_argument("--model", default="default")
    g.add_argument("--max-concurrency", type=int, default=256)
    g.add_argument("--timeout", type=float, default=600.0)
    g.add_argument("--retries", type=int, default=0)
    g.add_argument("--max-skew-ms", type=float, default=10.0)
    g.add_argument("--allow-skew", action="store_true", help="keep the run even if dispatch lagged")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infermeter", description=__doc__)
    parser.add_argument("--version", action="version", version=f"infermeter {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="run a workload through the simulated engine")
    common(p); _add_workload(p); _add_policy(p); _add_deadlines(p); _add_report(p)

    p = sub.add_parser("bench", help="run a workload against an OpenAI-compatible endpoint")
    common(p); _add_workload(p); _add_endpoint(p); _add_deadlines(p); _add_report(p)

    p = sub.add_parser("serve-mock", help="serve the simulator behind an OpenAI-compatible endpoint")
    _add_policy(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--time-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("profile-prefill", help="fit prefill time against prompt length")
    common(p); _add_policy(p)
    p.add_argument("--target", default="sim", help="'sim' or an endpoint base URL")
    p.add_argument("--model", default="default")
    p.add_argument("--lengths", default=",".join(map(str, DEFAULT_PROFILE_LENGTHS)))
    p.add_argument("--reps", type=int, default=2)

    p = sub.add_parser("capacity", help="search the highest request rate meeting an SLO")
    common(p); _add_workload(p); _add_policy(p); _add_deadlines(p)
    p.add_argument("--target", default="sim", help="'sim', 'bench' (needs --base-url) or 'step:<qps>' fixture")
    p.add_argument("--base-url")
    p.add_argument("--model", default="default")
    p.add_argument("--slo", required=True)
    p.add_argument("--q-lo", type=float, default=0.1)
    p.add_argument("--q-hi", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--repetitions", type=int, default=1)

    p = sub.add_parser("fluid-rate", help="smallest decode deadline meeting a fluidity requirement")
    common(p); _add_deadlines(p)
    p.add_argument("run", type=Path, help="stored RunRecord JSON")
    p.add_argument("--percentile", type=float, default=99.0)
    p.add_argument("--fluidity", type=float, default=0.9)
    p.add_argument("--dd-lo", type=float, default=1e-3)
    p.add_argument("--dd-hi", type=float, default=2.0)
    p.add_argument("--tol", type=float, default=0.01)

    p = sub.add_parser("report", help="re-aggregate stored RunRecords")
    common(p); _add_deadlines(p); _add_report(p)
    p.add_argument("runs", type=Path, nargs="+")

    p = sub.add_parser("compare", help="ratio table of reports against a baseline")
    p.add_argument("reports", type=Path, nargs="+", help="report JSON or RunRecord JSON files")
    p.add_argument("--baseline", type=int, default=0)
    p.add_argument("--out", type=Path, help="directory for comparison JSON and CDF plots")
    _add_deadlines(p)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="override the output directory")
    return parser


# --------------------------------------------------------------------------- resolution helpers

def resolve_workload(args, qps=None, seed=None):
    seed = args.seed if seed is None else seed
    flt = SHORT_CONTEXT_FILTER if args.filter == "short-context" else None
    if args.max_prefill is not None or args.max_decode is not None:
        flt = LengthFilter(args.max_prefill, args.max_decode)
    src = args.workload
    if src.startswith("trace:"):
        specs = load_trace(src[len("trace:"):], flt)[: args.count]
    else:
        name = src[len("profile:"):] if src.startswith("profile:") else src
        specs = synthesize(name, args.count, seed, flt)
    return assign_arrivals(specs, args.arrival, args.qps if qps is None else qps, seed)


def resolve_policy(args) -> PolicyConfig:
    cfg = PolicyConfig.load(args.config) if getattr(args, "config", None) else PolicyConfig()
    if getattr(args, "policy", None):
        cfg = cfg.with_policy(args.policy)
    return cfg


def resolve_deadlines(args, cfg: PolicyConfig = None) -> DeadlinePolicy:
    if getattr(args, "prefill_fit", None):
        fit = PrefillFit.load(args.prefill_fit)
    else:
        lat = cfg.latency if cfg is not None else LatencyModelConfig()
        fit = PrefillFit((0.0, lat.prefill_linear_s_per_token, lat.prefill_quad_s_per_token_sq))
    return DeadlinePolicy(fit, args.slack, args.decode_deadline)


def _percentiles(text):
    return [float(x) if "." in x else int(x) for x in text.split(",") if x.strip()]


def _report(args, run: RunRecord, deadlines: DeadlinePolicy, label=""):
    slo = parse_slo(args.slo) if args.slo else None
    headline = args.headline.split(",") if args.headline else None
    return build_report(run, deadlines, slo, _percentiles(args.percentiles), headline,
                        single_statistic=args.single_statistic,
                        lint_config=LintConfig(args.ttft_bound, args.tbt_bound), label=label)


def _write_manifest(out: Path, argv, command: str, resolved: dict, seed) -> Path:
    manifest = {"subcommand": command, "argv": list(argv), "resolved": resolved, "seed": seed,
                "tool_version": __version__}
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return p


def _finish(args, report: RunReport) -> int:
    print(report.to_text())
    if args.strict and any(f.severity == "fail" for f in report.lints):
        return EXIT_LINT
    return EXIT_OK


# --------------------------------------------------------------------------- commands

def cmd_simulate(args, argv):
    cfg = resolve_policy(args)
    workload = resolve_workload(args)
    deadlines = resolve_deadlines(args, cfg)
    run = simulate(workload, cfg, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    run.save(args.out / "runrecord.json")
    rep = _report(args, run, deadlines, label=cfg.policy)
    export(rep, args.out, args.formats.split(","))
    _write_manifest(args.out, argv, "simulate",
                    {"policy": cfg.to_dict(), "deadlines": deadlines.to_dict(), "workload": args.workload,
                     "count": args.count, "qps": args.qps, "arrival": args.arrival}, args.seed)
    return _finish(args, rep)


def _endpoint(args, base_url=None):
    return EndpointConfig(base_url=base_url or args.base_url, model_name=args.model,
                          request_timeout_s=getattr(args, "timeout", 600.0),
                          max_concurrency=getattr(args, "max_concurrency", 256),
                          retries=getattr(args, "retries", 0),
                          max_dispatch_skew_s=getattr(args, "max_skew_ms", 10.0) / 1e3)


def cmd_bench(args, argv):
    ep = _endpoint(args)
    workload = resolve_workload(args)
    deadlines = resolve_deadlines(args)
    run = run_load(workload, ep, seed=args.seed, check_skew=not args.allow_skew)
    args.out.mkdir(parents=True, exist_ok=True)
    run.save(args.out / "runrecord.json")
    run.export_events_csv(args.out / "token_events.csv")
    rep = _report(args, run, deadlines, label="bench")
    export(rep, args.out, args.formats.split(","))
    _write_manifest(args.out, argv, "bench", {"endpoint": ep.public_dict(), "deadlines": deadlines.to_dict(),
                                              "workload": args.workload, "count": args.count, "qps": args.qps},
                    args.seed)
    return _finish(args, rep)


def cmd_serve_mock(args, argv):
    cfg = resolve_policy(args)
    server = serve_mock(cfg, (args.host, args.port), args.time_scale, seed=args.seed)
    print(f"mock endpoint: {server.url}/v1/chat/completions  (policy {cfg.policy}, time_scale {args.time_scale})",
          flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def cmd_profile_prefill(args, argv):
    lengths = [int(x) for x in args.lengths.split(",")]
    if args.target == "sim":
        target = resolve_policy(args)
    else:
        target = EndpointConfig(base_url=args.target, model_name=args.model, max_concurrency=1)
    fit = profile_prefill(target, lengths, args.reps, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    fit.save(args.out / "prefill_fit.json")
    _write_manifest(args.out, argv, "profile-prefill", {"target": args.target, "lengths": lengths}, args.seed)
    c0, c1, c2 = fit.coefficients
    print(f"T_p(n) = {c0:.6g} + {c1:.6g}*n + {c2:.6g}*n^2   (rms residual {fit.residual_rms:.3g}s)")
    return EXIT_OK


def cmd_capacity(args, argv):
    slo = parse_slo(args.slo)
    if args.target.startswith("step:"):
        threshold = float(args.target.split(":", 1)[1])
        evaluate = lambda q: q <= threshold
    else:
        cfg = resolve_policy(args)
        deadlines = resolve_deadlines(args, cfg)
        if args.target == "bench":
            if not args.base_url:
                raise ValueError("--target bench needs --base-url")
            ep = _endpoint(args)

        def evaluate(q):
            workload = resolve_workload(args, qps=q)
            run = run_load(workload, ep, seed=args.seed, check_skew=False) if args.target == "bench" \
                else simulate(workload, cfg, seed=args.seed)
            rep = build_report(run, deadlines, slo)
            return rep.slo_attainment >= slo.target, {"attainment": rep.slo_attainment,
                                                      "p99_ttft_s": rep.summaries["ttft"][99]}
    res = capacity_search(evaluate, slo, args.q_lo, args.q_hi, args.tol, args.repetitions, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "capacity.json").write_text(json.dumps(res.to_dict(), indent=1) + "\n")
    _write_manifest(args.out, argv, "capacity", {"slo": slo.to_dict(), "target": args.target}, args.seed)
    note = "  (unbounded within search range)" if res.unbounded else ""
    print(f"max_qps = {res.max_qps:.4f} after {len(res.probes)} probes{note}")
    return EXIT_OK


def cmd_fluid_rate(args, argv):
    run = RunRecord.load(args.run)
    deadlines = resolve_deadlines(args, _policy_from_meta(run))
    reqs = run.request_map()
    tls = [t for t in run.timelines if t.finished and t.token_times]
    dps = [make_deadlines(deadlines, reqs[t.request_id]).prefill_deadline_s for t in tls]
    res = fluid_rate_search(tls, dps, args.percentile, args.fluidity, args.dd_lo, args.dd_hi, args.tol)
    args.out.mkdir(parents=True, exist_ok=True)
    out = {"decode_deadline_s": res.decode_deadline_s, "rate_tokens_per_s": res.rate_tokens_per_s,
           "percentile": args.percentile, "fluidity_threshold": args.fluidity, "evaluations": res.evaluations}
    (args.out / "fluid_rate.json").write_text(json.dumps(out, indent=1) + "\n")
    print(f"D_d* = {res.decode_deadline_s * 1e3:.3f} ms  ->  fluid rate {res.rate_tokens_per_s:.2f} tokens/s")
    return EXIT_OK


def _policy_from_meta(run: RunRecord):
    pc = run.meta.get("policy_config")
    return PolicyConfig.from_dict(pc) if pc else None


def cmd_report(args, argv):
    args.out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    reports = []
    for i, path in enumerate(args.runs):
        run = RunRecord.load(path)
        rep = _report(args, run, resolve_deadlines(args, _policy_from_meta(run)), label=path.stem)
        reports.append(rep)
        status = max(status, _finish(args, rep))
    export(reports if len(reports) > 1 else reports[0], args.out, args.formats.split(","))
    return status


def _load_report(path: Path, args) -> RunReport:
    d = json.loads(path.read_text())
    if d.get("schema", "").startswith("infermeter.runrecord"):
        run = RunRecord.from_dict(d)
        return build_report(run, resolve_deadlines(args, _policy_from_meta(run)), label=path.stem)
    rep = RunReport.from_dict(d)
    if not rep.label:
        rep.label = path.stem
    return rep


def cmd_compare(args, argv):
    reports = [_load_report(p, args) for p in args.reports]
    cmp = compare(reports, args.baseline)
    print(cmp.to_text())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "comparison.json").write_text(json.dumps(cmp.to_dict(), indent=1) + "\n")
        export(reports, args.out, ("svg",), prefix="compare")
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = json.loads(args.manifest.read_text())
    rerun = list(manifest["argv"])
    if args.out is not None:
        rerun += ["--out", str(args.out)]
    return main(rerun)


COMMANDS = {
    "simulate": cmd_simulate, "bench": cmd_bench, "serve-mock": cmd_serve_mock,
    "profile-prefill": cmd_profile_prefill, "capacity": cmd_capacity, "fluid-rate": cmd_fluid_rate,
    "report": cmd_report, "compare": cmd_compare, "replay": cmd_replay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
