"""Demo application: a test-suite execution service.

A planner object splits suites of CPU-bound work items (naive Fibonacci)
evenly over worker objects, one worker per host; the driver dispatches the
plan with one thread per worker and collects results. Suite definitions
travel to workers as a content-addressed artifact.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from .core import BY_REFERENCE, BY_VALUE, Bytes, Int64, List, Map, Ref, Text
from .hostd import ClassRegistry, CloudClass, MethodSpec
from .manager import CloudManager, CloudObjectHandle

MAX_FIB_INDEX = 40  # bounds naive-recursion runtime


def fib(n: int) -> int:
    if n <= 2:
        return 1
    return fib(n - 1) + fib(n - 2)


@dataclass(frozen=True)
class TestSuiteSpec:
    """One suite: `tasks` independent work items, each computing fib(n)."""

    suite_id: str
    tasks: int
    n: int

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError("tasks must be >= 1")
        if not 1 <= self.n <= MAX_FIB_INDEX:
            raise ValueError(f"n must be in [1, {MAX_FIB_INDEX}]")


def parse_suites(text: str) -> list[TestSuiteSpec]:
    """Suite file format: one JSON record {suite_id, tasks, n} per line."""
    suites = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            suites.append(
                TestSuiteSpec(record["suite_id"], int(record["tasks"]), int(record["n"]))
            )
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"suites line {lineno}: {e}") from e
    return suites


def render_suites(suites: list[TestSuiteSpec]) -> str:
    return "".join(
        json.dumps(
            {"suite_id": s.suite_id, "tasks": s.tasks, "n": s.n}, sort_keys=True
        )
        + "\n"
        for s in suites
    )


class SuiteWorker:
    """Executes work items; learns the suite definitions from the published
    artifact rather than from each call."""

    def __init__(self, ctx, suites_digest: Bytes):
        payload = ctx.fetch_artifact(suites_digest.value)
        self._by_id = {s.suite_id: s for s in parse_suites(payload.decode("utf-8"))}

    def run_task(self, suite_id: Text, index: Int64) -> Map:
        spec = self._by_id.get(suite_id.value)
        if spec is None:
            raise KeyError(f"unknown suite {suite_id.value!r}")
        return Map({"value": Int64(fib(spec.n)), "n": Int64(spec.n)})


class SuitePlanner:
    """Pure scheduling: spreads each suite's tasks evenly over workers."""

    def __init__(self, ctx, lead_worker: Ref):
        self.lead_worker = lead_worker

    def plan(self, suites: List, worker_count: Int64) -> List:
        assignments = []
        for suite in suites.items:
            suite_id = suite["suite_id"]
            tasks = suite["tasks"].value
            for index in range(tasks):
                assignments.append(
                    Map(
                        {
                            "suite_id": suite_id,
                            "task": Int64(index),
                            "worker": Int64(index % worker_count.value),
                        }
                    )
                )
        return List(tuple(assignments))

    def lead(self) -> Ref:
        return self.lead_worker


def build_registry() -> ClassRegistry:
    registry = ClassRegistry()
    registry.register(
        CloudClass(
            name="suite-worker",
            factory=SuiteWorker,
            ctor_params=(BY_VALUE,),
            methods={
                "run_task": MethodSpec(SuiteWorker.run_task, params=(BY_VALUE, BY_VALUE)),
            },
        )
    )
    registry.register(
        CloudClass(
            name="suite-planner",
            factory=SuitePlanner,
            ctor_params=(BY_REFERENCE,),
            methods={
                "plan": MethodSpec(SuitePlanner.plan, params=(BY_VALUE, BY_VALUE)),
                "lead": MethodSpec(SuitePlanner.lead, returns=BY_REFERENCE),
            },
        )
    )
    return registry


REGISTRY = build_registry()

REGISTRY_SPEC = "elastikit.demo:REGISTRY"


@dataclass
class SuiteResult:
    suite_id: str
    results: list[int] = field(default_factory=list)
    durations_ms: list[int] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_record(self) -> dict:
        return {
            "suite_id": self.suite_id,
            "ok": self.ok,
            "results": self.results,
            "durations_ms": self.durations_ms,
            "errors": self.errors,
            "total_ms": sum(self.durations_ms),
        }


class DemoApp:
    """Deploys the planner and one worker per host, then runs suites."""

    def __init__(self, manager: CloudManager, suites: list[TestSuiteSpec], workers: int):
        self.manager = manager
        self.suites = suites
        blob = render_suites(suites).encode("utf-8")
        self.digest = manager.publish_artifact(blob)
        self.workers: list[CloudObjectHandle] = [
            manager.deploy_object("suite-worker", [Bytes(self.digest)])
            for _ in range(workers)
        ]
        self.planner = manager.deploy_object("suite-planner", [self.workers[0]])

    def plan(self) -> list[tuple[str, int, int]]:
        suites_value = List(
            tuple(
                Map({"suite_id": Text(s.suite_id), "tasks": Int64(s.tasks)})
                for s in self.suites
            )
        )
        planned = self.manager.invoke(
            self.planner, "plan", [suites_value, Int64(len(self.workers))]
        )
        return [
            (a["suite_id"].value, a["task"].value, a["worker"].value)
            for a in planned.items
        ]

    def run(self) -> tuple[list[SuiteResult], int]:
        """Execute one full invocation; returns per-suite results and the
        makespan in wall milliseconds."""
        assignments = self.plan()
        per_worker: dict[int, list[tuple[str, int]]] = {}
        for suite_id, task, worker in assignments:
            per_worker.setdefault(worker, []).append((suite_id, task))
        results = {s.suite_id: SuiteResult(s.suite_id) for s in self.suites}
        results_lock = threading.Lock()

        def drive(worker_index: int) -> None:
            handle = self.workers[worker_index]
            for suite_id, task in per_worker.get(worker_index, []):
                started = time.monotonic_ns()
                try:
                    outcome = self.manager.invoke(
                        handle, "run_task", [Text(suite_id), Int64(task)]
                    )
                    duration = (time.monotonic_ns() - started) // 1_000_000
                    with results_lock:
                        results[suite_id].results.append(outcome["value"].value)
                        results[suite_id].durations_ms.append(duration)
                except Exception as e:  # infrastructure or application failure
                    with results_lock:
                        results[suite_id].errors.append(str(e))

        t0 = time.monotonic_ns()
        threads = [
            threading.Thread(target=drive, args=(i,)) for i in range(len(self.workers))
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        makespan_ms = (time.monotonic_ns() - t0) // 1_000_000
        for result in results.values():
            self.manager.emit_event(
                "custom.billing",
                {
                    "suite_id": Text(result.suite_id),
                    "total_ms": Int64(sum(result.durations_ms)),
                },
            )
        return list(results.values()), makespan_ms


def baseline_run(suites: list[TestSuiteSpec], worker_count: int, pool) -> int:
    """No-middleware reference: the same work items on a pre-started
    process pool of worker_count workers; returns makespan ms."""
    tasks = [s.n for s in suites for _ in range(s.tasks)]
    t0 = time.monotonic_ns()
    pool.map(fib, tasks, chunksize=1)
    return (time.monotonic_ns() - t0) // 1_000_000
