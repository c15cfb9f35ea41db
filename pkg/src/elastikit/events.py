"""Monitoring events, the consolidated event stream, and the windowed
metric engine that feeds the in-memory monitoring repository.

Events are stamped with a single manager-side clock at intake, so ordering
invariants hold regardless of where an event originated.
"""

from __future__ import annotations

import json
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .core import (
    Bool,
    CloudHostId,
    CloudObjectId,
    Float64,
    Int64,
    Null,
    Text,
    Value,
    value_from_py,
    value_to_py,
)
from .errors import DuplicateMetric, InvalidStatement, MalformedLog, UnknownMetric

# Predefined lifecycle and status event types; anything else must be
# application-defined under the "custom." prefix.
EVENT_CATALOG = frozenset(
    {
        "HostProvisionRequested",
        "HostOnline",
        "HostOffline",
        "HostTerminatedEvent",
        "ObjectScheduledEvent",
        "ObjectDeployedEvent",
        "ObjectMigratedEvent",
        "ObjectDestroyedEvent",
        "ExecutionStarted",
        "ExecutionFinished",
        "ExecutionFailedEvent",
        "PolicyDecisionRejected",
        "DropEvent",
    }
)

CUSTOM_PREFIX = "custom."

DEFAULT_BUFFER_SIZE = 65536


# --- clocks ---------------------------------------------------------------

class WallClock:
    """Monotonic milliseconds since construction."""

    def __init__(self):
        self._zero = time.monotonic_ns()

    def now_ms(self) -> int:
        return (time.monotonic_ns() - self._zero) // 1_000_000


class VirtualClock:
    """Manually advanced clock for the simulated backend and for tests."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance_to(self, t_ms: int) -> None:
        with self._lock:
            if t_ms < self._now:
                raise ValueError("virtual clock cannot go backwards")
            self._now = t_ms

    def advance(self, dt_ms: int) -> None:
        if dt_ms < 0:
            raise ValueError("virtual clock cannot go backwards")
        with self._lock:
            self._now += dt_ms


# --- event model ----------------------------------------------------------

class SourceKind(Enum):
    MANAGER = "manager"
    HOST = "host"
    OBJECT = "object"
    EXTERNAL = "external"


@dataclass(frozen=True)
class EventSource:
    kind: SourceKind
    id: Optional[int] = None  # 128-bit id value for HOST / OBJECT sources

    def __post_init__(self):
        needs_id = self.kind in (SourceKind.HOST, SourceKind.OBJECT)
        if needs_id != (self.id is not None):
            raise ValueError("host/object sources carry an id, others do not")

    @classmethod
    def manager(cls) -> "EventSource":
        return cls(SourceKind.MANAGER)

    @classmethod
    def external(cls) -> "EventSource":
        return cls(SourceKind.EXTERNAL)

    @classmethod
    def host(cls, host_id: CloudHostId) -> "EventSource":
        return cls(SourceKind.HOST, host_id.value)

    @classmethod
    def object(cls, co_id: CloudObjectId) -> "EventSource":
        return cls(SourceKind.OBJECT, co_id.value)

    def render(self) -> str:
        if self.kind is SourceKind.HOST:
            return f"host:{CloudHostId(self.id).hex}"
        if self.kind is SourceKind.OBJECT:
            return f"object:{CloudObjectId(self.id).hex}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "EventSource":
        if text == "manager":
            return cls.manager()
        if text == "external":
            return cls.external()
        kind, sep, hexid = text.partition(":")
        if sep and kind == "host":
            return cls.host(CloudHostId.from_bytes(bytes.fromhex(hexid)))
        if sep and kind == "object":
            return cls.object(CloudObjectId.from_bytes(bytes.fromhex(hexid)))
        raise ValueError(f"bad event source {text!r}")


@dataclass(frozen=True)
class MonitoringEvent:
    """One record in the monitoring stream.

    timestamp is milliseconds since manager start; events created at the
    edge carry 0 and are restamped at intake.
    """

    event_type: str
    timestamp: int
    source: EventSource
    properties: dict[str, Value] = field(default_factory=dict)

    def __post_init__(self):
        if self.event_type not in EVENT_CATALOG and not (
            self.event_type.startswith(CUSTOM_PREFIX)
            and len(self.event_type) > len(CUSTOM_PREFIX)
        ):
            raise ValueError(
                f"event type {self.event_type!r} is neither predefined nor custom.*"
            )
        for k, v in self.properties.items():
            if not isinstance(k, str) or not isinstance(v, Value):
                raise TypeError("properties must map str to Value")

    def stamped(self, ts: int) -> "MonitoringEvent":
        return MonitoringEvent(self.event_type, ts, self.source, self.properties)

    def to_json_line(self) -> str:
        record = {
            "props": {k: value_to_py(v) for k, v in sorted(self.properties.items())},
            "source": self.source.render(),
            "ts": self.timestamp,
            "type": self.event_type,
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json_line(cls, line: str) -> "MonitoringEvent":
        try:
            record = json.loads(line)
            return cls(
                event_type=record["type"],
                timestamp=int(record["ts"]),
                source=EventSource.parse(record["source"]),
                properties={k: value_from_py(v) for k, v in record["props"].items()},
            )
        except MalformedLog:
            raise
        except Exception as e:
            raise MalformedLog(f"bad event record: {e}") from e


def read_event_log(lines: Iterable[str]) -> list[MonitoringEvent]:
    events = []
    for i, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            events.append(MonitoringEvent.from_json_line(line))
        except MalformedLog as e:
            raise MalformedLog(f"line {i}: {e}") from e
    return events


# --- event bus ------------------------------------------------------------

class EventSubscription:
    """Bounded FIFO view of the stream; overflow drops the incoming event."""

    def __init__(self, maxlen: int):
        self._maxlen = maxlen
        self._items: deque[MonitoringEvent] = deque()
        self._cond = threading.Condition()
        self.dropped = 0

    def _offer(self, event: MonitoringEvent) -> bool:
        with self._cond:
            if len(self._items) >= self._maxlen:
                self.dropped += 1
                return False
            self._items.append(event)
            self._cond.notify()
            return True

    def get(self, timeout: Optional[float] = None) -> Optional[MonitoringEvent]:
        with self._cond:
            if not self._items and timeout is not None:
                self._cond.wait(timeout)
            if not self._items and timeout is None:
                while not self._items:
                    self._cond.wait()
            return self._items.popleft() if self._items else None

    def drain(self) -> list[MonitoringEvent]:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def wait_for(
        self, predicate: Callable[[MonitoringEvent], bool], timeout: float
    ) -> Optional[MonitoringEvent]:
        """Pop events until one satisfies predicate; others are discarded."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            event = self.get(timeout=remaining)
            if event is not None and predicate(event):
                return event


class EventBus:
    """Consolidated stream: stamps events at intake and fans them out to the
    metric engine, subscribers, and synchronous taps."""

    def __init__(self, clock, engine: Optional["MetricEngine"] = None,
                 buffer_size: int = DEFAULT_BUFFER_SIZE):
        self._clock = clock
        self._engine = engine
        self._buffer_size = buffer_size
        self._subs: list[EventSubscription] = []
        self._taps: list[Callable[[MonitoringEvent], None]] = []
        self._lock = threading.Lock()
        self.dropped_total = 0
        self._last_drop_event_ms = None  # wall ms, for the 1/s meta-event limit

    def subscribe(self, buffer_size: Optional[int] = None) -> EventSubscription:
        sub = EventSubscription(buffer_size or self._buffer_size)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: EventSubscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def add_tap(self, fn: Callable[[MonitoringEvent], None]) -> None:
        with self._lock:
            self._taps.append(fn)

    def emit(self, event: MonitoringEvent) -> MonitoringEvent:
        dropped_somewhere = False
        with self._lock:
            stamped = event.stamped(self._clock.now_ms())
            if self._engine is not None:
                self._engine.offer(stamped)
            for sub in self._subs:
                if not sub._offer(stamped):
                    self.dropped_total += 1
                    dropped_somewhere = True
            taps = list(self._taps)
        if dropped_somewhere:
            self._maybe_emit_drop_event()
        for tap in taps:
            tap(stamped)
        return stamped

    def _maybe_emit_drop_event(self) -> None:
        now = time.monotonic_ns() // 1_000_000
        if (
            self._last_drop_event_ms is not None
            and now - self._last_drop_event_ms < 1000
        ):
            return
        self._last_drop_event_ms = now
        self.emit(
            MonitoringEvent(
                "DropEvent",
                0,
                EventSource.manager(),
                {"dropped": Int64(self.dropped_total)},
            )
        )


# --- metric statements ----------------------------------------------------

class Aggregate(Enum):
    AVG = "avg"
    SUM = "sum"
    COUNT = "count"
    MIN = "min"
    MAX = "max"


class WindowKind(Enum):
    TIME_BATCH = "time_batch"
    SLIDING = "sliding"


@dataclass(frozen=True)
class WindowSpec:
    kind: WindowKind
    duration_ms: int


_CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")


@dataclass(frozen=True)
class Filter:
    """Property comparison against a literal. Equality is type-strict;
    ordering applies to numeric values only (Int64/Float64 compare across
    types); events whose property is missing or incomparable do not match."""

    property: str
    cmp: str
    literal: Value

    def __post_init__(self):
        if self.cmp not in _CMP_OPS:
            raise ValueError(f"bad comparison operator {self.cmp!r}")

    def matches(self, event: MonitoringEvent) -> bool:
        v = event.properties.get(self.property)
        if v is None:
            return False
        if self.cmp == "==":
            return v == self.literal
        if self.cmp == "!=":
            return v != self.literal
        a = _as_number(v)
        b = _as_number(self.literal)
        if a is None or b is None:
            return False
        if self.cmp == "<":
            return a < b
        if self.cmp == "<=":
            return a <= b
        if self.cmp == ">":
            return a > b
        return a >= b


def _as_number(v: Value):
    if isinstance(v, Int64):
        return v.value
    if isinstance(v, Float64):
        return v.value
    return None


@dataclass(frozen=True)
class MetricStatement:
    aggregate: Aggregate
    property: str  # ignored for count ("*" conventionally)
    event_type: str
    window: WindowSpec
    filter: Optional[Filter] = None

    def to_text(self) -> str:
        text = (
            f"SELECT {self.aggregate.value}({self.property}) "
            f"FROM {self.event_type} "
            f"WINDOW {self.window.kind.value}({self.window.duration_ms})"
        )
        if self.filter is not None:
            text += (
                f" WHERE {self.filter.property} {self.filter.cmp} "
                f"{_render_literal(self.filter.literal)}"
            )
        return text

    @classmethod
    def parse(cls, text: str) -> "MetricStatement":
        return parse_statement(text)


_STATEMENT_RE = re.compile(
    r"^\s*select\s+(avg|sum|count|min|max)\s*\(\s*(\*|[A-Za-z_][\w.]*)\s*\)"
    r"\s+from\s+([A-Za-z_][\w.]*)"
    r"\s+window\s+(time_batch|sliding)\s*\(\s*(\d+)\s*\)"
    r"(?:\s+where\s+([A-Za-z_][\w.]*)\s*(==|!=|<=|>=|<|>)\s*(.+?))?\s*$",
    re.IGNORECASE,
)


def parse_statement(text: str) -> MetricStatement:
    m = _STATEMENT_RE.match(text)
    if m is None:
        raise InvalidStatement(f"cannot parse statement: {text!r}")
    agg, prop, event_type, window_kind, duration, fprop, fcmp, flit = m.groups()
    flt = None
    if fprop is not None:
        flt = Filter(fprop, fcmp, _parse_literal(flit))
    return MetricStatement(
        aggregate=Aggregate(agg.lower()),
        property=prop,
        event_type=event_type,
        window=WindowSpec(WindowKind(window_kind.lower()), int(duration)),
        filter=flt,
    )


def _parse_literal(text: str) -> Value:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return Text(text[1:-1])
    if text == "true":
        return Bool(True)
    if text == "false":
        return Bool(False)
    try:
        return Int64(int(text))
    except ValueError:
        pass
    try:
        return Float64(float(text))
    except ValueError:
        raise InvalidStatement(f"bad literal {text!r}") from None


def _render_literal(v: Value) -> str:
    if isinstance(v, Text):
        return f"'{v.value}'"
    if isinstance(v, Bool):
        return "true" if v.value else "false"
    if isinstance(v, (Int64, Float64)):
        return repr(v.value)
    raise InvalidStatement(f"literal must be scalar, got {type(v).__name__}")


class MetricType(Enum):
    INT64 = "Int64"
    FLOAT64 = "Float64"


@dataclass(frozen=True)
class MonitoringMetric:
    """Named, typed, windowed aggregation over the event stream."""

    name: str
    value_type: MetricType
    statement: MetricStatement


def validate_metric(metric: MonitoringMetric) -> None:
    stmt = metric.statement
    if stmt.window.duration_ms <= 0:
        raise InvalidStatement("window duration must be > 0 ms")
    if stmt.aggregate is Aggregate.AVG and metric.value_type is not MetricType.FLOAT64:
        raise InvalidStatement("avg yields Float64")
    if stmt.aggregate is Aggregate.COUNT and metric.value_type is not MetricType.INT64:
        raise InvalidStatement("count yields Int64")
    if stmt.aggregate is not Aggregate.COUNT and stmt.property == "*":
        raise InvalidStatement("only count may aggregate over *")


# --- repository and engine --------------------------------------------------

@dataclass(frozen=True)
class MetricReading:
    value: Value
    updated_at: int


class MonitoringRepository:
    """Latest value per metric; written only by the engine, readable from
    any thread."""

    def __init__(self):
        self._rows: dict[str, Optional[MetricReading]] = {}
        self._lock = threading.Lock()

    def _register(self, name: str) -> None:
        with self._lock:
            self._rows[name] = None

    def _write(self, name: str, value: Value, ts: int) -> None:
        with self._lock:
            prev = self._rows.get(name)
            if prev is not None and ts < prev.updated_at:
                ts = prev.updated_at  # repository timestamps never go backwards
            self._rows[name] = MetricReading(value, ts)

    def query(self, name: str) -> Optional[MetricReading]:
        with self._lock:
            if name not in self._rows:
                raise UnknownMetric(name)
            return self._rows[name]

    def names(self) -> list[str]:
        with self._lock:
            return list(self._rows)


class _MetricState:
    def __init__(self, metric: MonitoringMetric, registered_at: int):
        self.metric = metric
        self.registered_at = registered_at
        self.window_start = registered_at  # time-batch bookkeeping
        self.batch_values: list = []
        self.batch_matched = 0
        self.sliding: deque = deque()  # (ts, numeric value or None)
        self.skipped = 0

    def next_close(self) -> Optional[int]:
        if self.metric.statement.window.kind is not WindowKind.TIME_BATCH:
            return None
        return self.window_start + self.metric.statement.window.duration_ms


class MetricEngine:
    """Evaluates registered metrics against the stamped event stream.

    offer() and advance_to() are called on one logical thread (the bus
    serializes intake); reads go through the repository.
    """

    def __init__(self, repository: MonitoringRepository, clock):
        self._repo = repository
        self._clock = clock
        self._metrics: dict[str, _MetricState] = {}
        self._observers: list[Callable[[str, Value, int], None]] = []
        self._lock = threading.RLock()

    def add_observer(self, fn: Callable[[str, Value, int], None]) -> None:
        with self._lock:
            self._observers.append(fn)

    def register(self, metric: MonitoringMetric) -> None:
        with self._lock:
            if metric.name in self._metrics:
                raise DuplicateMetric(metric.name)
            validate_metric(metric)
            self._metrics[metric.name] = _MetricState(metric, self._clock.now_ms())
            self._repo._register(metric.name)

    def skip_count(self, name: str) -> int:
        with self._lock:
            if name not in self._metrics:
                raise UnknownMetric(name)
            return self._metrics[name].skipped

    def next_deadline(self) -> Optional[int]:
        with self._lock:
            closes = [s.next_close() for s in self._metrics.values()]
            closes = [c for c in closes if c is not None]
            return min(closes) if closes else None

    def advance_to(self, now: int) -> None:
        """Close every time-batch window whose end is <= now, oldest first."""
        with self._lock:
            while True:
                due = [
                    state
                    for state in self._metrics.values()
                    if state.next_close() is not None and state.next_close() <= now
                ]
                if not due:
                    return
                state = min(due, key=lambda s: s.next_close())
                self._close_batch(state)

    def _close_batch(self, state: _MetricState) -> None:
        end = state.next_close()
        value = _aggregate(
            state.metric.statement.aggregate,
            state.metric.value_type,
            state.batch_values,
            state.batch_matched,
        )
        state.batch_values = []
        state.batch_matched = 0
        state.window_start = end
        self._write(state.metric.name, value, end)

    def offer(self, event: MonitoringEvent) -> None:
        with self._lock:
            self.advance_to(event.timestamp)
            for state in self._metrics.values():
                stmt = state.metric.statement
                if event.event_type != stmt.event_type:
                    continue
                if stmt.filter is not None and not stmt.filter.matches(event):
                    continue
                self._apply(state, event)

    def _apply(self, state: _MetricState, event: MonitoringEvent) -> None:
        stmt = state.metric.statement
        numeric = None
        if stmt.aggregate is not Aggregate.COUNT:
            raw = event.properties.get(stmt.property)
            numeric = _coerce(raw, state.metric.value_type)
            if numeric is None:
                state.skipped += 1
        if stmt.window.kind is WindowKind.TIME_BATCH:
            state.batch_matched += 1
            if numeric is not None:
                state.batch_values.append(numeric)
            return
        # Sliding: re-aggregate over (t - d, t] on every matching event.
        t = event.timestamp
        state.sliding.append((t, numeric))
        horizon = t - stmt.window.duration_ms
        while state.sliding and state.sliding[0][0] <= horizon:
            state.sliding.popleft()
        values = [v for _, v in state.sliding if v is not None]
        value = _aggregate(stmt.aggregate, state.metric.value_type, values, len(state.sliding))
        self._write(state.metric.name, value, t)

    def _write(self, name: str, value: Value, ts: int) -> None:
        self._repo._write(name, value, ts)
        for fn in self._observers:
            fn(name, value, ts)


def _coerce(v: Optional[Value], vtype: MetricType):
    """Numeric view of a property for aggregation, or None to skip.

    Int64 metrics take Int64 occurrences only; Float64 metrics take both
    numeric kinds, promoting integers."""
    if vtype is MetricType.INT64:
        return v.value if isinstance(v, Int64) else None
    if isinstance(v, Int64):
        return float(v.value)
    if isinstance(v, Float64):
        return v.value
    return None


def _aggregate(agg: Aggregate, vtype: MetricType, values: list, matched: int) -> Value:
    if agg is Aggregate.COUNT:
        return Int64(matched)
    if agg is Aggregate.AVG:
        return Float64(sum(values) / len(values)) if values else Null()
    if agg is Aggregate.SUM:
        if not values:
            return Int64(0) if vtype is MetricType.INT64 else Float64(0.0)
        total = sum(values)
        return Int64(total) if vtype is MetricType.INT64 else Float64(total)
    if not values:
        return Null()
    result = min(values) if agg is Aggregate.MIN else max(values)
    return Int64(result) if vtype is MetricType.INT64 else Float64(result)
