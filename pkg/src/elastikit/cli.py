"""Command-line surface: the demo service, the scaling benchmark, and
event-trace tooling.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

from . import demo as demo_mod
from .errors import ElastikitError, MalformedLog
from .events import MonitoringEvent, read_event_log
from .manager import CloudManager, ManagerConfig

CONFIG_ENV_VAR = "ELASTIKIT_CONFIG"

DESK_SCALE_SUITES = 8
DESK_SCALE_TASKS = 4
DESK_SCALE_FIB = 26
DESK_SCALE_HOSTS = "1,2,4"
DESK_SCALE_RUNS = 5


def _load_config(path_arg) -> ManagerConfig:
    path = path_arg or os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return ManagerConfig()
    return ManagerConfig.load(path)


def default_suites(count: int = DESK_SCALE_SUITES) -> list[demo_mod.TestSuiteSpec]:
    return [
        demo_mod.TestSuiteSpec(f"suite-{i:02d}", DESK_SCALE_TASKS, DESK_SCALE_FIB)
        for i in range(count)
    ]


# --- demo -----------------------------------------------------------------

def run_demo(config: ManagerConfig, suites, workers: int, events_out=None, out=sys.stdout) -> int:
    """Deploy one worker per host plus the planner, run every suite once,
    and print one result record per suite. Exit 0 iff all tasks succeeded."""
    config.policy = f"roundrobin:{workers}"  # one worker object per host
    if config.backend == "local" and not config.registry_spec:
        config.registry_spec = demo_mod.REGISTRY_SPEC
    manager = CloudManager(demo_mod.REGISTRY, config)
    subscription = manager.subscribe_events()
    try:
        with manager:
            app = demo_mod.DemoApp(manager, suites, workers)
            results, makespan_ms = app.run()
            for result in sorted(results, key=lambda r: r.suite_id):
                print(json.dumps(result.to_record(), sort_keys=True), file=out)
            print(
                json.dumps({"makespan_ms": makespan_ms, "workers": workers}, sort_keys=True),
                file=out,
            )
            ok = all(r.ok for r in results)
    except ElastikitError as e:
        print(f"demo failed: {e}", file=sys.stderr)
        return 1
    finally:
        if events_out is not None:
            with open(events_out, "w", encoding="utf-8") as f:
                for event in subscription.drain():
                    f.write(event.to_json_line() + "\n")
    return 0 if ok else 1


# --- bench ------------------------------------------------------------------

@dataclass
class BenchReport:
    """rows: (host_count, run, kind, makespan_ms) with kind bench|baseline."""

    rows: list

    def medians(self) -> dict:
        grouped: dict = {}
        for host_count, _run, kind, ms in self.rows:
            grouped.setdefault((host_count, kind), []).append(ms)
        return {key: statistics.median(values) for key, values in grouped.items()}

    def overhead_slope(self):
        """Least-squares slope of (bench median - baseline median) against
        host count; None until both kinds have two host counts."""
        medians = self.medians()
        points = []
        for (host_count, kind), value in sorted(medians.items()):
            if kind == "bench" and (host_count, "baseline") in medians:
                points.append((host_count, value - medians[(host_count, "baseline")]))
        if len(points) < 2:
            return None
        n = len(points)
        mean_x = sum(x for x, _ in points) / n
        mean_y = sum(y for _, y in points) / n
        denom = sum((x - mean_x) ** 2 for x, _ in points)
        if denom == 0:
            return None
        return sum((x - mean_x) * (y - mean_y) for x, y in points) / denom

    def write_csv(self, path) -> None:
        lines = ["host_count,run,kind,makespan_ms"]
        for host_count, run, kind, ms in sorted(self.rows):
            lines.append(f"{host_count},{run},{kind},{ms}")
        for (host_count, kind), value in sorted(self.medians().items()):
            lines.append(f"summary,{host_count},{kind},{value}")
        slope = self.overhead_slope()
        if slope is not None:
            lines.append(f"summary,overhead_slope_ms_per_host,,{slope:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "BenchReport":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
            if not line or line.startswith("summary,"):
                continue
            host_count, run, kind, ms = line.split(",")
            rows.append((int(host_count), int(run), kind, float(ms)))
        return cls(rows)


def run_bench(
    host_counts: list[int],
    runs: int,
    suites,
    config: ManagerConfig | None = None,
    report: BenchReport | None = None,
) -> BenchReport:
    """Measured middleware executions alternating with no-middleware
    baseline executions, per host count. Hosts and workers are provisioned
    before the measured section, mirroring a static pool."""
    report = report or BenchReport([])
    for host_count in host_counts:
        existing = [r[1] for r in report.rows if r[0] == host_count]
        first_run = max(existing, default=0) + 1
        bench_config = config or ManagerConfig()
        bench_config.backend = "local"
        bench_config.policy = f"roundrobin:{host_count}"
        bench_config.registry_spec = demo_mod.REGISTRY_SPEC
        bench_config.max_hosts = max(bench_config.max_hosts, host_count)
        manager = CloudManager(demo_mod.REGISTRY, bench_config)
        pool = multiprocessing.get_context("fork").Pool(host_count)
        try:
            with manager:
                app = demo_mod.DemoApp(manager, suites, host_count)
                for run in range(first_run, first_run + runs):
                    _, makespan_ms = app.run()
                    report.rows.append((host_count, run, "bench", makespan_ms))
                    baseline_ms = demo_mod.baseline_run(suites, host_count, pool)
                    report.rows.append((host_count, run, "baseline", baseline_ms))
        finally:
            pool.terminate()
            pool.join()
    return report


def cmd_bench(args) -> int:
    host_counts = [int(h) for h in args.hosts.split(",") if h.strip()]
    if args.suites:
        suites = demo_mod.parse_suites(Path(args.suites).read_text(encoding="utf-8"))
    else:
        suites = default_suites()
    config = _load_config(args.config)
    report = BenchReport([])
    out = Path(args.out)
    if out.exists():
        report = BenchReport.read_csv(out)  # reruns append run indices
    try:
        report = run_bench(host_counts, args.runs, suites, config, report)
    finally:
        if report.rows:
            report.write_csv(out)  # partial results are flushed on failure
    for (host_count, kind), value in sorted(report.medians().items()):
        print(f"{kind} median, {host_count} host(s): {value:.0f} ms")
    slope = report.overhead_slope()
    if slope is not None:
        print(f"overhead slope: {slope:.1f} ms per host")
    return 0


# --- trace -------------------------------------------------------------------

def assert_order(events: list[MonitoringEvent], wanted: list[str]) -> bool:
    """True iff the named event types occur in the given relative order."""
    position = 0
    for event in events:
        if position < len(wanted) and event.event_type == wanted[position]:
            position += 1
    return position == len(wanted)


def cmd_trace(args) -> int:
    try:
        lines = Path(args.log).read_text(encoding="utf-8").splitlines()
        events = read_event_log(lines)
    except (OSError, MalformedLog) as e:
        print(f"cannot read log: {e}", file=sys.stderr)
        return 1
    events.sort(key=lambda e: e.timestamp)
    selected = events
    if args.type:
        wanted_types = set(args.type)
        selected = [e for e in events if e.event_type in wanted_types]
    for event in selected:
        props = json.dumps(
            {k: _prop_text(v) for k, v in sorted(event.properties.items())},
            sort_keys=True,
        )
        print(f"{event.timestamp}\t{event.event_type}\t{event.source.render()}\t{props}")
    if args.assert_order:
        wanted = [t.strip() for t in args.assert_order.split(",") if t.strip()]
        if not assert_order(events, wanted):
            print(f"order violated: {','.join(wanted)}", file=sys.stderr)
            return 2
    return 0


def _prop_text(value):
    from .core import value_to_py

    return value_to_py(value)


# --- entry point -----------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="elastikit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_demo = sub.add_parser("demo", help="run the test-suite service demo")
    p_demo.add_argument("--config", default=None, help=f"config file (or ${CONFIG_ENV_VAR})")
    p_demo.add_argument("--suites", default=None, help="suite file, one JSON record per line")
    p_demo.add_argument("--workers", type=int, default=2, help="worker objects (= hosts)")
    p_demo.add_argument("--events-out", default=None, help="write the event log here")

    p_bench = sub.add_parser("bench", help="scaling benchmark with baseline comparison")
    p_bench.add_argument("--hosts", default=DESK_SCALE_HOSTS)
    p_bench.add_argument("--runs", type=int, default=DESK_SCALE_RUNS)
    p_bench.add_argument("--out", required=True, help="CSV report path")
    p_bench.add_argument("--suites", default=None)
    p_bench.add_argument("--config", default=None)

    p_trace = sub.add_parser("trace", help="inspect an exported event log")
    p_trace.add_argument("log")
    p_trace.add_argument("--type", action="append", help="keep only this event type")
    p_trace.add_argument(
        "--assert-order",
        default=None,
        help="comma-separated event types that must appear in this order",
    )

    args = parser.parse_args(argv)
    if args.command == "demo":
        config = _load_config(args.config)
        if args.suites:
            suites = demo_mod.parse_suites(Path(args.suites).read_text(encoding="utf-8"))
        else:
            suites = default_suites(2)
        return run_demo(config, suites, args.workers, args.events_out)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_trace(args)


if __name__ == "__main__":
    sys.exit(main())
