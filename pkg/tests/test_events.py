"""Event model, bus semantics, statement language, and the metric engine."""

from __future__ import annotations

import random
import threading

import pytest

from elastikit.core import Bool, Float64, Int64, Null, Text
from elastikit.errors import (
    DuplicateMetric,
    InvalidStatement,
    MalformedLog,
    UnknownMetric,
)
from elastikit.events import (
    Aggregate,
    EventBus,
    EventSource,
    Filter,
    MetricEngine,
    MetricStatement,
    MetricType,
    MonitoringEvent,
    MonitoringMetric,
    MonitoringRepository,
    VirtualClock,
    WindowKind,
    WindowSpec,
    parse_statement,
    read_event_log,
    validate_metric,
)

from oracles import reaggregate, values_equivalent


def ev(event_type, ts, **props):
    return MonitoringEvent(event_type, ts, EventSource.external(), dict(props))


def test_event_type_must_be_catalog_or_custom():
    MonitoringEvent("HostOnline", 0, EventSource.manager())
    MonitoringEvent("custom.billing", 0, EventSource.external())
    with pytest.raises(ValueError):
        MonitoringEvent("NotAThing", 0, EventSource.manager())
    with pytest.raises(ValueError):
        MonitoringEvent("custom.", 0, EventSource.manager())


def test_json_line_is_bit_exact_and_roundtrips():
    event = ev("custom.billing", 12, suite=Text("s1"), total_ms=Int64(7))
    line = event.to_json_line()
    assert line == (
        '{"props":{"suite":"s1","total_ms":7},"source":"external",'
        '"ts":12,"type":"custom.billing"}'
    )
    assert MonitoringEvent.from_json_line(line) == event


def test_malformed_log_line_raises():
    with pytest.raises(MalformedLog):
        MonitoringEvent.from_json_line("{nope")
    with pytest.raises(MalformedLog):
        read_event_log(['{"ts": 1}'])


def test_bus_delivers_to_subscriber_in_order():
    clock = VirtualClock()
    bus = EventBus(clock)
    sub = bus.subscribe()
    emitted = [ev("custom.x", 0, i=Int64(i)) for i in range(10_000)]
    for e in emitted:
        bus.emit(e)
    got = sub.drain()
    assert len(got) == 10_000
    assert [g.properties["i"] for g in got] == [e.properties["i"] for e in emitted]


def test_bus_restamps_at_intake():
    clock = VirtualClock()
    bus = EventBus(clock)
    sub = bus.subscribe()
    clock.advance(500)
    bus.emit(ev("custom.x", 12345))
    assert sub.get(timeout=1).timestamp == 500


def test_bus_overflow_drops_incoming_and_emits_meta_event():
    clock = VirtualClock()
    bus = EventBus(clock)
    tiny = bus.subscribe(buffer_size=4)
    roomy = bus.subscribe()
    for i in range(10):
        bus.emit(ev("custom.x", 0, i=Int64(i)))
    kept = tiny.drain()
    assert len(kept) == 4
    assert [k.properties["i"].value for k in kept] == [0, 1, 2, 3]  # incoming dropped
    assert bus.dropped_total > 0
    types = [e.event_type for e in roomy.drain()]
    assert "DropEvent" in types


def test_bus_tap_sees_stamped_events():
    clock = VirtualClock()
    bus = EventBus(clock)
    seen = []
    bus.add_tap(seen.append)
    clock.advance(7)
    bus.emit(ev("custom.x", 0))
    assert seen[0].timestamp == 7


# --- statements ---------------------------------------------------------------


def test_parse_statement_full_form():
    stmt = parse_statement(
        "SELECT avg(duration) FROM ObjectDeployedEvent WINDOW time_batch(10000)"
        " WHERE co_id == 'abc'"
    )
    assert stmt.aggregate is Aggregate.AVG
    assert stmt.property == "duration"
    assert stmt.event_type == "ObjectDeployedEvent"
    assert stmt.window == WindowSpec(WindowKind.TIME_BATCH, 10_000)
    assert stmt.filter == Filter("co_id", "==", Text("abc"))
    assert parse_statement(stmt.to_text()) == stmt


def test_parse_statement_variants():
    assert parse_statement("select count(*) from custom.billing window sliding(500)").aggregate is Aggregate.COUNT
    stmt = parse_statement("SELECT min(v) FROM custom.x WINDOW sliding(10) WHERE v >= 1.5")
    assert stmt.filter.literal == Float64(1.5)
    stmt = parse_statement("SELECT max(v) FROM custom.x WINDOW sliding(10) WHERE ok != true")
    assert stmt.filter.literal == Bool(True)


def test_parse_statement_rejects_garbage():
    for text in (
        "SELECT med(v) FROM custom.x WINDOW sliding(10)",
        "SELECT avg(v) FROM custom.x",
        "avg(v) FROM custom.x WINDOW sliding(10)",
        "SELECT avg(v) FROM custom.x WINDOW hopping(10)",
        "SELECT avg(v) FROM custom.x WINDOW sliding(ten)",
    ):
        with pytest.raises(InvalidStatement):
            parse_statement(text)


def _metric(name, agg, prop, event_type, window, vtype, flt=None):
    return MonitoringMetric(
        name, vtype, MetricStatement(agg, prop, event_type, window, flt)
    )


def test_metric_validation_rules():
    batch = WindowSpec(WindowKind.TIME_BATCH, 1000)
    with pytest.raises(InvalidStatement):
        validate_metric(_metric("m", Aggregate.AVG, "v", "custom.x", batch, MetricType.INT64))
    with pytest.raises(InvalidStatement):
        validate_metric(_metric("m", Aggregate.COUNT, "*", "custom.x", batch, MetricType.FLOAT64))
    with pytest.raises(InvalidStatement):
        validate_metric(
            _metric("m", Aggregate.SUM, "v", "custom.x", WindowSpec(WindowKind.SLIDING, 0), MetricType.INT64)
        )
    with pytest.raises(InvalidStatement):
        validate_metric(_metric("m", Aggregate.SUM, "*", "custom.x", batch, MetricType.INT64))
    validate_metric(_metric("m", Aggregate.AVG, "v", "custom.x", batch, MetricType.FLOAT64))


# --- engine -----------------------------------------------------------------


def _engine():
    clock = VirtualClock()
    repo = MonitoringRepository()
    engine = MetricEngine(repo, clock)
    return clock, repo, engine


def test_avg_setup_duration_over_ten_second_batches():
    # avg(duration) from deployment events in 10 s time batches
    clock, repo, engine = _engine()
    engine.register(
        _metric(
            "avg_setup_ms",
            Aggregate.AVG,
            "duration",
            "ObjectDeployedEvent",
            WindowSpec(WindowKind.TIME_BATCH, 10_000),
            MetricType.FLOAT64,
        )
    )
    assert repo.query("avg_setup_ms") is None  # before the first window close
    for ts, duration in ((1000, 2), (2000, 4), (9000, 6)):
        clock.advance_to(ts)
        engine.offer(
            MonitoringEvent(
                "ObjectDeployedEvent", ts, EventSource.manager(), {"duration": Int64(duration)}
            )
        )
    engine.advance_to(10_000)
    reading = repo.query("avg_setup_ms")
    assert reading.value == Float64(4.0)
    assert reading.updated_at == 10_000


def test_custom_event_type_statement_matches():
    clock, repo, engine = _engine()
    engine.register(
        _metric(
            "billing_count",
            Aggregate.COUNT,
            "*",
            "custom.billing",
            WindowSpec(WindowKind.TIME_BATCH, 1000),
            MetricType.INT64,
        )
    )
    engine.offer(ev("custom.billing", 10))
    engine.offer(ev("custom.other", 20))
    engine.advance_to(1000)
    assert repo.query("billing_count").value == Int64(2 - 1)


def test_empty_windows_write_typed_zero_or_null():
    clock, repo, engine = _engine()
    batch = WindowSpec(WindowKind.TIME_BATCH, 100)
    engine.register(_metric("c", Aggregate.COUNT, "*", "custom.x", batch, MetricType.INT64))
    engine.register(_metric("si", Aggregate.SUM, "v", "custom.x", batch, MetricType.INT64))
    engine.register(_metric("sf", Aggregate.SUM, "v", "custom.x", batch, MetricType.FLOAT64))
    engine.register(_metric("a", Aggregate.AVG, "v", "custom.x", batch, MetricType.FLOAT64))
    engine.register(_metric("mn", Aggregate.MIN, "v", "custom.x", batch, MetricType.INT64))
    engine.advance_to(100)
    assert repo.query("c").value == Int64(0)
    assert repo.query("si").value == Int64(0)
    assert repo.query("sf").value == Float64(0.0)
    assert repo.query("a").value == Null()
    assert repo.query("mn").value == Null()


def test_every_event_lands_in_exactly_one_batch_window():
    clock, repo, engine = _engine()
    engine.register(
        _metric("c", Aggregate.COUNT, "*", "custom.x", WindowSpec(WindowKind.TIME_BATCH, 100), MetricType.INT64)
    )
    counts = []
    engine.add_observer(lambda name, value, ts: counts.append(value.value))
    # boundary event at exactly t=100 must fall into the second window
    for ts in (0, 50, 99, 100, 150, 199):
        clock.advance_to(ts)
        engine.offer(ev("custom.x", ts))
    engine.advance_to(200)
    assert counts == [3, 3]


def test_sliding_window_reaggregates_per_event():
    clock, repo, engine = _engine()
    engine.register(
        _metric("s", Aggregate.SUM, "v", "custom.x", WindowSpec(WindowKind.SLIDING, 100), MetricType.INT64)
    )
    writes = []
    engine.add_observer(lambda name, value, ts: writes.append((ts, value.value)))
    for ts, v in ((0, 1), (50, 2), (100, 4), (151, 8)):
        clock.advance_to(ts)
        engine.offer(ev("custom.x", ts, v=Int64(v)))
    # windows: (−100,0]={1}, (−50,50]={1,2}, (0,100]={2,4}, (51,151]={4,8}
    assert writes == [(0, 1), (50, 3), (100, 6), (151, 12)]


def test_filter_and_skip_counting():
    clock, repo, engine = _engine()
    engine.register(
        _metric(
            "s",
            Aggregate.SUM,
            "v",
            "custom.x",
            WindowSpec(WindowKind.TIME_BATCH, 100),
            MetricType.INT64,
            Filter("kind", "==", Text("keep")),
        )
    )
    engine.offer(ev("custom.x", 1, kind=Text("keep"), v=Int64(3)))
    engine.offer(ev("custom.x", 2, kind=Text("drop"), v=Int64(50)))
    engine.offer(ev("custom.x", 3, v=Int64(70)))  # missing filter property
    engine.offer(ev("custom.x", 4, kind=Text("keep"), v=Text("NaN")))  # skipped
    engine.offer(ev("custom.x", 5, kind=Text("keep"), v=Float64(2.0)))  # int metric skips floats
    engine.advance_to(100)
    assert repo.query("s").value == Int64(3)
    assert engine.skip_count("s") == 2


def test_float_metric_promotes_integers():
    clock, repo, engine = _engine()
    engine.register(
        _metric("a", Aggregate.AVG, "v", "custom.x", WindowSpec(WindowKind.TIME_BATCH, 10), MetricType.FLOAT64)
    )
    engine.offer(ev("custom.x", 0, v=Int64(1)))
    engine.offer(ev("custom.x", 1, v=Float64(2.0)))
    engine.advance_to(10)
    assert repo.query("a").value == Float64(1.5)


def test_duplicate_and_unknown_metric():
    clock, repo, engine = _engine()
    m = _metric("m", Aggregate.COUNT, "*", "custom.x", WindowSpec(WindowKind.TIME_BATCH, 10), MetricType.INT64)
    engine.register(m)
    with pytest.raises(DuplicateMetric):
        engine.register(m)
    with pytest.raises(UnknownMetric):
        repo.query("nope")
    with pytest.raises(UnknownMetric):
        engine.skip_count("nope")


def test_repository_updated_at_is_monotone():
    clock, repo, engine = _engine()
    engine.register(
        _metric("c", Aggregate.COUNT, "*", "custom.x", WindowSpec(WindowKind.TIME_BATCH, 10), MetricType.INT64)
    )
    stamps = []
    engine.add_observer(lambda name, value, ts: stamps.append(repo.query("c").updated_at))
    engine.advance_to(1000)
    assert stamps == sorted(stamps)


def test_emit_through_bus_reaches_engine():
    clock = VirtualClock()
    repo = MonitoringRepository()
    engine = MetricEngine(repo, clock)
    bus = EventBus(clock, engine=engine)
    engine.register(
        _metric("c", Aggregate.COUNT, "*", "custom.billing", WindowSpec(WindowKind.TIME_BATCH, 100), MetricType.INT64)
    )
    bus.emit(ev("custom.billing", 0))
    clock.advance(100)
    engine.advance_to(100)
    assert repo.query("c").value == Int64(1)


def test_emit_is_thread_safe():
    clock = VirtualClock()
    bus = EventBus(clock)
    sub = bus.subscribe()

    def hammer(k):
        for i in range(500):
            bus.emit(ev("custom.x", 0, k=Int64(k), i=Int64(i)))

    threads = [threading.Thread(target=hammer, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = sub.drain()
    assert len(got) == 2000
    # per-thread (per-source-stream) order is preserved
    for k in range(4):
        ordered = [e.properties["i"].value for e in got if e.properties["k"].value == k]
        assert ordered == sorted(ordered)


# --- randomized oracle equivalence (small; acceptance runs the full 500) ------

_TYPES = ["custom.a", "custom.b", "ExecutionFinished"]
_PROPS = ["v", "duration", "w"]


def _random_stream(rng, n):
    ts = 0
    events = []
    for _ in range(n):
        ts += rng.randint(0, 400)
        props = {}
        for prop in _PROPS:
            roll = rng.random()
            if roll < 0.4:
                props[prop] = Int64(rng.randint(-50, 50))
            elif roll < 0.7:
                props[prop] = Float64(rng.uniform(-10, 10))
            elif roll < 0.8:
                props[prop] = Text("junk")
        events.append(ev(rng.choice(_TYPES), ts, **props))
    return events


def _random_metric(rng, name):
    agg = rng.choice(list(Aggregate))
    vtype = (
        MetricType.FLOAT64
        if agg is Aggregate.AVG
        else MetricType.INT64
        if agg is Aggregate.COUNT
        else rng.choice([MetricType.INT64, MetricType.FLOAT64])
    )
    flt = None
    if rng.random() < 0.4:
        flt = Filter(
            rng.choice(_PROPS),
            rng.choice(["==", "!=", "<", "<=", ">", ">="]),
            Int64(rng.randint(-20, 20)),
        )
    window = WindowSpec(
        rng.choice([WindowKind.TIME_BATCH, WindowKind.SLIDING]), rng.randint(100, 2000)
    )
    prop = "*" if agg is Aggregate.COUNT else rng.choice(_PROPS)
    return _metric(name, agg, prop, rng.choice(_TYPES), window, vtype, flt)


def test_engine_matches_brute_force_oracle():
    rng = random.Random(77)
    for case in range(60):
        clock, repo, engine = _engine()
        metric = _random_metric(rng, f"m{case}")
        engine.register(metric)
        writes = []
        engine.add_observer(lambda name, value, ts: writes.append((ts, value)))
        events = _random_stream(rng, rng.randint(0, 80))
        for event in events:
            clock.advance_to(event.timestamp)
            engine.offer(event)
        until = (events[-1].timestamp if events else 0) + rng.randint(0, 3000)
        clock.advance_to(until)
        engine.advance_to(until)
        expected = reaggregate(metric, events, 0, until)
        assert len(writes) == len(expected), metric
        for (ts_a, val_a), (ts_b, val_b) in zip(writes, expected):
            assert ts_a == ts_b, metric
            assert values_equivalent(val_a, val_b), (metric, val_a, val_b)
