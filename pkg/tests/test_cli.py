import json

import pytest
from click.testing import CliRunner

from app import main


@pytest.fixture
def runner():
    return CliRunner()


def test_clients(runner):
    result = runner.invoke(main, ["clients"])
    assert result.exit_code == 0
    assert "run_time_exposed_share\t0.452" in result.output
    assert "systemd-timesyncd" in result.output


def test_chronos_bound(runner):
    result = runner.invoke(main, ["chronos-bound"])
    assert result.exit_code == 0
    assert result.output.startswith("max_poison_round\t11\n")


def test_table_probabilities(runner, tmp_path):
    result = runner.invoke(main, ["table-probabilities", "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert "2.1%" in result.output and "15.3%" in result.output
    assert (tmp_path / "table_probabilities.tsv").exists()
    assert (tmp_path / "table_probabilities.md").read_text(encoding="utf-8").startswith("# Attack probabilities")


def test_run_writes_trace_and_report(runner, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(main, ["run", "runtime-openntpd", "--out", str(out)])
    assert result.exit_code == 0
    assert "runtime-openntpd\tfalse\tNoRuntimeDns" in result.output
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["cause"] == "NoRuntimeDns" and report["matches_expectation"]
    assert (out / "trace.jsonl").stat().st_size > 0

    rendered = runner.invoke(main, ["report", str(out / "trace.jsonl")])
    assert rendered.exit_code == 0
    assert "## Events" in rendered.output


def test_unexpected_outcome_exits_one(runner, tmp_path):
    result = runner.invoke(main, ["run", "runtime-openntpd", "--out", str(tmp_path), "--expect", "success"])
    assert result.exit_code == 1


def test_missing_scenario_is_an_error(runner, tmp_path):
    result = runner.invoke(main, ["run", "no-such-scenario", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "error:" in result.output


def test_corrupt_trace_is_an_error(runner, tmp_path):
    path = tmp_path / "trace.jsonl"
    path.write_text('{"t": 0, "kind": "send", "actor": "a", "detail": {}}\n{oops\n', encoding="utf-8")
    result = runner.invoke(main, ["report", str(path)])
    assert result.exit_code == 2
    assert "line 2" in result.output


def test_sweep_needs_a_grid(runner):
    result = runner.invoke(main, ["sweep", "runtime-ntpd"])
    assert result.exit_code == 2


def test_monte_carlo_sweep(runner):
    result = runner.invoke(main, ["sweep", "runtime-ntpd", "--grid", "m=2,3", "--trials", "500"])
    assert result.exit_code == 0
    header, *rows = result.output.strip().splitlines()
    assert header.split("\t")[0] == "analysis.m"
    assert len(rows) == 2


def test_blind_spoof_probe(runner, tmp_path):
    result = runner.invoke(main, ["probe", "probe-blind-spoof", "--trials", "2000", "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert "passed\ttrue" in result.output
    summary = json.loads((tmp_path / "probe_summary.json").read_text(encoding="utf-8"))
    assert summary["kind"] == "blind_spoof" and summary["attempts"] == 2000
