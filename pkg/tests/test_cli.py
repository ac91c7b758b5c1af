import json
import subprocess
import sys

import pytest

from infermeter.cli import main

SMALL = ["--count", "80", "--qps", "2", "--workload", "profile:azure-conv-2024"]


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_simulate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run_cli("simulate", *SMALL, "--seed", 3, "--out", tmp_path / d) == 0
    a = (tmp_path / "a" / "runrecord.json").read_bytes()
    assert a == (tmp_path / "b" / "runrecord.json").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_run_directory_contents(tmp_path):
    out = tmp_path / "run"
    assert run_cli("simulate", *SMALL, "--policy", "chunked", "--out", out) == 0
    for name in ("manifest.json", "runrecord.json", "report.json", "report_requests.csv",
                 "report_cdf_ttft.csv", "report_cdf_ttft.svg"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and manifest["seed"] == 0
    assert manifest["resolved"]["policy"]["policy"] == "chunked_prefill"


def test_replay_reproduces_run(tmp_path):
    assert run_cli("simulate", *SMALL, "--seed", 9, "--out", tmp_path / "orig") == 0
    assert run_cli("replay", tmp_path / "orig" / "manifest.json", "--out", tmp_path / "again") == 0
    assert (tmp_path / "orig" / "runrecord.json").read_bytes() == (tmp_path / "again" / "runrecord.json").read_bytes()


def test_strict_exits_one_on_failing_lint(tmp_path):
    args = ["simulate", *SMALL, "--ttft-bound", "0.001", "--out", tmp_path / "s"]
    assert run_cli(*args) == 0
    assert run_cli(*args, "--strict") == 1


def test_compare_mismatched_workloads_exits_two(tmp_path, capsys):
    run_cli("simulate", *SMALL, "--seed", 1, "--out", tmp_path / "a")
    run_cli("simulate", *SMALL, "--seed", 2, "--out", tmp_path / "b")
    rc = run_cli("compare", tmp_path / "a" / "report.json", tmp_path / "b" / "report.json")
    assert rc == 2
    assert "WorkloadMismatch" in capsys.readouterr().err


def test_compare_policies_same_workload(tmp_path, capsys):
    for pol in ("prefill_priority", "chunked_prefill"):
        assert run_cli("simulate", *SMALL, "--policy", pol, "--out", tmp_path / pol) == 0
    capsys.readouterr()
    rc = run_cli("compare", tmp_path / "prefill_priority" / "runrecord.json",
                 tmp_path / "chunked_prefill" / "report.json", "--out", tmp_path / "cmp")
    assert rc == 0
    assert "L4" in capsys.readouterr().out
    assert (tmp_path / "cmp" / "compare_cdf_tbt.svg").read_text().count("<path") == 2


def test_capacity_step_fixture(tmp_path, capsys):
    rc = run_cli("capacity", "--target", "step:7.3", "--slo", "p99 ttft<2s fluidity>0.9@0.99",
                 "--tol", "0.05", "--out", tmp_path)
    assert rc == 0
    res = json.loads((tmp_path / "capacity.json").read_text())
    assert 7.3 / 1.05 <= res["max_qps"] <= 7.3


def test_capacity_against_simulator(tmp_path):
    rc = run_cli("capacity", "--target", "sim", "--slo", "p90 ttft<1s", "--count", "100",
                 "--q-lo", "0.1", "--q-hi", "0.5", "--tol", "0.2", "--out", tmp_path)
    assert rc == 0
    assert json.loads((tmp_path / "capacity.json").read_text())["max_qps"] >= 0.1


def test_fluid_rate_and_report_subcommands(tmp_path):
    assert run_cli("simulate", *SMALL, "--out", tmp_path / "sim") == 0
    rr = tmp_path / "sim" / "runrecord.json"
    assert run_cli("fluid-rate", rr, "--fluidity", "0.5", "--percentile", "50", "--out", tmp_path / "fr") == 0
    fr = json.loads((tmp_path / "fr" / "fluid_rate.json").read_text())
    assert fr["rate_tokens_per_s"] == pytest.approx(1 / fr["decode_deadline_s"])
    assert run_cli("report", rr, "--out", tmp_path / "rep") == 0
    assert (tmp_path / "rep" / "report.json").exists()


def test_profile_prefill_sim(tmp_path):
    assert run_cli("profile-prefill", "--target", "sim", "--lengths", "512,2048,8192", "--out", tmp_path) == 0
    fit = json.loads((tmp_path / "prefill_fit.json").read_text())
    assert len(fit["coefficients"]) == 3


def test_bench_against_mock(mock_fast, tmp_path):
    rc = run_cli("bench", "--base-url", mock_fast.url, "--count", "30", "--qps", "10",
                 "--filter", "short-context", "--max-decode", "200", "--out", tmp_path)
    assert rc == 0
    header = (tmp_path / "token_events.csv").read_text().splitlines()[0]
    assert header == "request_id,event_index,time_s,tokens"


def test_bad_input_exits_two(tmp_path):
    assert run_cli("simulate", "--workload", "profile:nope", "--out", tmp_path) == 2
    assert run_cli("capacity", "--target", "step:1", "--slo", "p99 ttft>2s", "--out", tmp_path) == 2


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "infermeter.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("simulate", "bench", "serve-mock", "capacity", "fluid-rate", "compare", "replay"):
        assert sub in proc.stdout
