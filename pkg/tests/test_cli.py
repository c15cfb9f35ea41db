"""CLI surface: demo, bench report plumbing, and trace tooling."""

from __future__ import annotations

import json

import pytest

from elastikit.cli import (
    BenchReport,
    assert_order,
    default_suites,
    main,
    run_demo,
)
from elastikit.core import Int64, Text
from elastikit.demo import (
    DemoApp,
    SuitePlanner,
    TestSuiteSpec,
    fib,
    parse_suites,
    render_suites,
)
from elastikit.events import EventSource, MonitoringEvent
from elastikit.manager import CloudManager, ManagerConfig

from conftest import make_sim_manager


def test_fib_values():
    assert fib(1) == 1
    assert fib(2) == 1
    assert fib(10) == 55


def test_suite_spec_validation():
    with pytest.raises(ValueError):
        TestSuiteSpec("s", 0, 5)
    with pytest.raises(ValueError):
        TestSuiteSpec("s", 1, 0)
    with pytest.raises(ValueError):
        TestSuiteSpec("s", 1, 41)


def test_suites_file_roundtrip():
    suites = [TestSuiteSpec("a", 2, 5), TestSuiteSpec("b", 3, 7)]
    assert parse_suites(render_suites(suites)) == suites
    with pytest.raises(ValueError):
        parse_suites('{"suite_id": "x"}\n')


def test_single_task_suite_computes_55(tmp_path, capsys):
    config = ManagerConfig(backend="simulated", startup_delay_ms=0)
    rc = run_demo(config, [TestSuiteSpec("only", 1, 10)], workers=1)
    captured = capsys.readouterr().out.strip().splitlines()
    assert rc == 0
    records = [json.loads(line) for line in captured]
    assert records[0]["suite_id"] == "only"
    assert records[0]["results"] == [55]
    assert records[0]["ok"] is True


def test_even_task_split_across_workers():
    manager = make_sim_manager(policy="roundrobin:2")
    try:
        app = DemoApp(manager, [TestSuiteSpec("s", 4, 1)], workers=2)
        counts = {}
        for _suite, _task, worker in app.plan():
            counts[worker] = counts.get(worker, 0) + 1
        assert sorted(counts.values()) == [2, 2]

        app2 = DemoApp(manager, [TestSuiteSpec("s5", 5, 1)], workers=2)
        # reuse the same pool; only the new workers matter for the split
        counts = {}
        for _suite, _task, worker in app2.plan():
            counts[worker] = counts.get(worker, 0) + 1
        assert sorted(counts.values()) == [2, 3]
    finally:
        manager.shutdown()


def test_demo_emits_billing_custom_events():
    manager = make_sim_manager(policy="roundrobin:1")
    try:
        sub = manager.subscribe_events()
        app = DemoApp(manager, [TestSuiteSpec("s", 2, 3)], workers=1)
        app.run()
        billing = [e for e in sub.drain() if e.event_type == "custom.billing"]
        assert len(billing) == 1
        assert billing[0].properties["suite_id"] == Text("s")
    finally:
        manager.shutdown()


def test_demo_cli_end_to_end(tmp_path, capsys):
    events_path = tmp_path / "events.ldjson"
    suites_path = tmp_path / "suites.ldjson"
    suites_path.write_text('{"suite_id": "cli", "tasks": 2, "n": 6}\n')
    rc = main(
        [
            "demo",
            "--suites",
            str(suites_path),
            "--workers",
            "2",
            "--events-out",
            str(events_path),
        ]
    )
    out = capsys.readouterr().out
    assert rc == 0
    records = [json.loads(line) for line in out.strip().splitlines()]
    assert records[0]["results"] == [8, 8]  # fib(6)
    assert events_path.exists()
    rc = main(["trace", str(events_path), "--assert-order", "HostOnline,ObjectDeployedEvent,ExecutionFinished"])
    assert rc == 0


def test_config_env_var_is_honored(tmp_path, monkeypatch, capsys):
    config_path = tmp_path / "cfg"
    config_path.write_text("backend = simulated\nstartup_delay_ms = 0\n")
    monkeypatch.setenv("ELASTIKIT_CONFIG", str(config_path))
    suites_path = tmp_path / "suites.ldjson"
    suites_path.write_text('{"suite_id": "env", "tasks": 1, "n": 5}\n')
    rc = main(["demo", "--suites", str(suites_path), "--workers", "1"])
    assert rc == 0
    records = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert records[0]["results"] == [5]  # fib(5)


# --- trace ------------------------------------------------------------------------


def _log_lines(types):
    events = [
        MonitoringEvent(t, i * 10, EventSource.manager(), {"i": Int64(i)})
        for i, t in enumerate(types)
    ]
    return "".join(e.to_json_line() + "\n" for e in events)


def test_trace_empty_log(tmp_path, capsys):
    path = tmp_path / "empty.ldjson"
    path.write_text("")
    assert main(["trace", str(path)]) == 0
    assert capsys.readouterr().out == ""


def test_trace_filter_on_clean_run_is_empty(tmp_path, capsys):
    path = tmp_path / "log.ldjson"
    path.write_text(_log_lines(["HostOnline", "ObjectDeployedEvent", "HostOffline"]))
    assert main(["trace", str(path), "--type", "ExecutionFailedEvent"]) == 0
    assert capsys.readouterr().out == ""


def test_trace_assert_order_pass_and_fail(tmp_path, capsys):
    path = tmp_path / "log.ldjson"
    path.write_text(_log_lines(["HostOnline", "ObjectDeployedEvent", "HostOffline"]))
    assert main(["trace", str(path), "--assert-order", "HostOnline,HostOffline"]) == 0
    capsys.readouterr()
    assert main(["trace", str(path), "--assert-order", "HostOffline,HostOnline"]) == 2


def test_trace_malformed_log(tmp_path):
    path = tmp_path / "bad.ldjson"
    path.write_text("this is not json\n")
    assert main(["trace", str(path)]) == 1


def test_assert_order_is_subsequence_matching():
    events = [
        MonitoringEvent(t, i, EventSource.manager())
        for i, t in enumerate(
            ["HostOnline", "ExecutionStarted", "HostOnline", "HostOffline"]
        )
    ]
    assert assert_order(events, ["HostOnline", "HostOffline"])
    assert assert_order(events, ["ExecutionStarted", "HostOnline", "HostOffline"])
    assert not assert_order(events, ["HostOffline", "HostOnline"])


# --- bench report ---------------------------------------------------------------------


def test_bench_report_csv_roundtrip(tmp_path):
    report = BenchReport(
        [
            (1, 1, "bench", 100.0),
            (1, 1, "baseline", 90.0),
            (2, 1, "bench", 60.0),
            (2, 1, "baseline", 55.0),
            (1, 2, "bench", 110.0),
            (1, 2, "baseline", 95.0),
        ]
    )
    path = tmp_path / "report.csv"
    report.write_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "host_count,run,kind,makespan_ms"
    assert "summary,1,bench,105.0" in text
    assert "summary,overhead_slope_ms_per_host" in text
    loaded = BenchReport.read_csv(path)
    assert sorted(loaded.rows) == sorted(report.rows)
    assert loaded.medians()[(1, "bench")] == 105.0


def test_bench_report_slope():
    report = BenchReport(
        [
            (1, 1, "bench", 110.0),
            (1, 1, "baseline", 100.0),
            (2, 1, "bench", 120.0),
            (2, 1, "baseline", 100.0),
            (4, 1, "bench", 140.0),
            (4, 1, "baseline", 100.0),
        ]
    )
    assert report.overhead_slope() == pytest.approx(10.0)


def test_default_suites_shape():
    suites = default_suites()
    assert len(suites) == 8
    assert all(s.tasks == 4 and s.n == 26 for s in suites)
