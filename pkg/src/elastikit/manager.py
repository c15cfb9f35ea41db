"""Client-side cloud manager: schedules objects through the scaling policy,
enacts provisioning, deployment, and migration, proxies blocking
invocations, and serves the authoritative global-variable store.
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import wire
from .artifacts import ArtifactStore
from .backend import (
    DEFAULT_BILLING_UNIT_LOCAL_MS,
    DEFAULT_BILLING_UNIT_SIMULATED_MS,
    DEFAULT_STARTUP_DELAY_MS,
    Backend,
    HostState,
    LocalBackend,
    SimulatedBackend,
)
from .core import (
    CloudHostId,
    CloudObjectDescriptor,
    CloudObjectId,
    Float64,
    IdSource,
    Int64,
    List,
    Null,
    ObjectState,
    Ref,
    Text,
    Value,
)
from .errors import (
    ConnectionClosed,
    DeployFailed,
    DestUnreachable,
    ElastikitError,
    HostUnreachable,
    NotQuiescent,
    ObjectDestroyed,
    PolicyError,
    ProvisionFailed,
    UnknownCO,
    from_wire_code,
)
from .events import (
    Aggregate,
    EventBus,
    EventSource,
    EventSubscription,
    MetricEngine,
    MetricStatement,
    MetricType,
    MonitoringEvent,
    MonitoringMetric,
    MonitoringRepository,
    SourceKind,
    VirtualClock,
    WallClock,
    WindowKind,
    WindowSpec,
)
from .hostd import ClassRegistry, HostServices, load_registry
from .policy import (
    BillingDecision,
    HostView,
    ProvisionNew,
    ScalingDecision,
    ScalingPolicy,
    UseExisting,
    UTILIZATION_METRIC,
    parse_policy,
)
from .wire import (
    ArtifactData,
    ArtifactFetch,
    Connection,
    DeployCO,
    DestroyCO,
    Err,
    EventPush,
    GetField,
    GlobalGet,
    GlobalSet,
    InvokeCO,
    Message,
    Ok,
    RestoreCO,
    SetField,
    SnapshotCO,
)


@dataclass(frozen=True)
class CloudObjectHandle:
    """Typed handle to a deployed object; all operations through it block
    until the remote response arrives."""

    id: CloudObjectId
    class_name: str


@dataclass
class ManagerConfig:
    backend: str = "simulated"
    billing_time_unit_ms: Optional[int] = None  # default depends on backend
    max_hosts: int = 8
    policy: str = "single"
    listen_callback: str = "127.0.0.1:0"
    registry_spec: str = ""  # module:attr, required for the local backend
    startup_delay_ms: int = DEFAULT_STARTUP_DELAY_MS
    policy_deadline_ms: int = 1000
    utilization_window_ms: int = 10_000

    _KEYS = {
        "backend": str,
        "billing_time_unit_ms": int,
        "max_hosts": int,
        "policy": str,
        "listen_callback": str,
        "registry": str,
        "startup_delay_ms": int,
        "policy_deadline_ms": int,
        "utilization_window_ms": int,
    }

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ManagerConfig":
        config = cls()
        for key, raw in mapping.items():
            if key not in cls._KEYS:
                raise ValueError(f"unknown config key {key!r}")
            value = cls._KEYS[key](raw)
            if key == "registry":
                config.registry_spec = value
            else:
                setattr(config, key, value)
        if config.backend not in ("local", "simulated"):
            raise ValueError(f"backend must be local or simulated, got {config.backend!r}")
        return config

    @classmethod
    def load(cls, path) -> "ManagerConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text()))

    def effective_billing_unit(self) -> int:
        if self.billing_time_unit_ms is not None:
            return self.billing_time_unit_ms
        if self.backend == "local":
            return DEFAULT_BILLING_UNIT_LOCAL_MS
        return DEFAULT_BILLING_UNIT_SIMULATED_MS


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; # starts a comment."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key = value")
        mapping[key.strip()] = value.strip()
    return mapping


class GlobalStore:
    """Authoritative global variables; last write wins in the manager's
    order, reads of unset names yield Null."""

    def __init__(self):
        self._values: dict[str, Value] = {}
        self._lock = threading.Lock()

    def get(self, name: str) -> Value:
        with self._lock:
            return self._values.get(name, Null())

    def set(self, name: str, value: Value) -> None:
        if not isinstance(value, Value):
            raise TypeError("globals hold Values")
        with self._lock:
            self._values[name] = value


class _HostSignals:
    def __init__(self):
        self.online = threading.Event()
        self.offline = threading.Event()
        self.endpoint: Optional[str] = None


class CallbackServer:
    """Accepts connections from host daemons: takes their pushed events into
    the bus and answers global and artifact requests."""

    def __init__(self, manager: "CloudManager", listen: tuple[str, int]):
        self._manager = manager
        self._listen = listen
        self._listener: Optional[socket.socket] = None
        self._conns: list[Connection] = []
        self._signals: dict[int, _HostSignals] = {}
        self._lock = threading.Lock()
        self._shutdown = threading.Event()

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(self._listen)
        listener.listen(32)
        self._listener = listener
        threading.Thread(
            target=self._accept_loop, name="callback-accept", daemon=True
        ).start()

    def endpoint_text(self) -> str:
        host, port = self._listener.getsockname()
        return f"{host}:{port}"

    def _signals_for(self, host_value: int) -> _HostSignals:
        with self._lock:
            if host_value not in self._signals:
                self._signals[host_value] = _HostSignals()
            return self._signals[host_value]

    def wait_host_online(self, host_id: CloudHostId, timeout_s: float) -> Optional[str]:
        signals = self._signals_for(host_id.value)
        if not signals.online.wait(timeout_s):
            return None
        return signals.endpoint

    def wait_host_offline(self, host_id: CloudHostId, timeout_s: float) -> bool:
        return self._signals_for(host_id.value).offline.wait(timeout_s)

    def _accept_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_connection, args=(sock,), daemon=True
            ).start()

    def _serve_connection(self, sock: socket.socket) -> None:
        rfile = sock.makefile("rb")
        try:
            version, digest, host_id = wire.read_handshake(rfile, with_host_id=True)
        except (ConnectionClosed, OSError):
            sock.close()
            return
        if version != wire.PROTOCOL_VERSION:
            sock.sendall(wire.encode_frame(Err("ProtocolMismatch", f"got {version}"), 0))
            sock.close()
            return
        if digest != self._manager.registry.digest():
            sock.sendall(
                wire.encode_frame(Err("RegistryMismatch", "registry digests differ"), 0)
            )
            sock.close()
            return
        sock.sendall(wire.encode_frame(Ok(Null()), 0))
        conn = Connection(sock, handler=self._handle, rfile=rfile, name="callback-host")
        with self._lock:
            self._conns.append(conn)
        conn.start()

    def _handle(self, conn: Connection, msg: Message, request_id: int) -> None:
        try:
            if isinstance(msg, EventPush):
                self._intake(msg.event)
                return
            if isinstance(msg, GlobalGet):
                conn.respond(request_id, Ok(self._manager.global_get(msg.name)))
                return
            if isinstance(msg, GlobalSet):
                self._manager.global_set(msg.name, msg.value)
                conn.respond(request_id, Ok(Null()))
                return
            if isinstance(msg, ArtifactFetch):
                try:
                    payload = self._manager.artifacts.get(msg.digest)
                except ElastikitError as e:
                    conn.respond(request_id, Err("UnknownDigest", str(e)))
                    return
                conn.respond(request_id, ArtifactData(msg.digest, payload))
                return
            conn.respond(request_id, Err("UnsupportedMessage", type(msg).__name__))
        except ConnectionClosed:
            pass

    def _intake(self, event: MonitoringEvent) -> None:
        if event.source.kind is SourceKind.HOST:
            signals = self._signals_for(event.source.id)
            if event.event_type == "HostOnline":
                endpoint = event.properties.get("endpoint")
                signals.endpoint = endpoint.value if isinstance(endpoint, Text) else None
                signals.online.set()
            elif event.event_type == "HostOffline":
                signals.offline.set()
        self._manager.bus.emit(event)

    def close(self) -> None:
        self._shutdown.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()


class _DirectServices(HostServices):
    """Host services for in-process virtual hosts: straight function calls
    instead of callback frames."""

    def __init__(self, manager: "CloudManager"):
        self._manager = manager

    def emit_event(self, event: MonitoringEvent) -> None:
        self._manager.bus.emit(event)

    def global_get(self, name: str) -> Value:
        return self._manager.global_get(name)

    def global_set(self, name: str, value: Value) -> None:
        self._manager.global_set(name, value)

    def fetch_artifact(self, digest: bytes) -> bytes:
        return self._manager.artifacts.get(digest)


class _UtilizationSampler:
    """Turns execution events into `custom.host.load` samples: the busy
    ratio of the pool over the trailing window, fed to the utilization
    metric the threshold scaler reads."""

    def __init__(self, manager: "CloudManager", window_ms: int):
        self._manager = manager
        self._window_ms = window_ms
        self._finished: list[tuple[int, int]] = []  # (ts, duration)
        self._lock = threading.Lock()

    def __call__(self, event: MonitoringEvent) -> None:
        if event.event_type != "ExecutionFinished":
            return
        duration = event.properties.get("duration")
        if not isinstance(duration, Int64):
            return
        now = event.timestamp
        hosts = max(1, len(self._manager.host_pool_view()))
        with self._lock:
            self._finished.append((now, duration.value))
            horizon = now - self._window_ms
            self._finished = [(t, d) for t, d in self._finished if t > horizon]
            busy = sum(d for _, d in self._finished)
        ratio = min(1.0, busy / (self._window_ms * hosts))
        self._manager.emit_event(
            "custom.host.load", {"value": Float64(ratio)}, EventSource.manager()
        )


class _ObjectRecord:
    def __init__(self, co_id: CloudObjectId, class_name: str, host_id: CloudHostId):
        self.co_id = co_id
        self.class_name = class_name
        self.state = ObjectState.DEPLOYED
        self.resident_on: Optional[CloudHostId] = host_id
        self.gate = threading.Event()  # cleared while migrating
        self.gate.set()
        self.lock = threading.Lock()
        self.destroying = False

    def descriptor(self) -> CloudObjectDescriptor:
        with self.lock:
            resident = (
                self.resident_on
                if self.state in (ObjectState.DEPLOYED, ObjectState.MIGRATING)
                else None
            )
            return CloudObjectDescriptor(self.co_id, self.class_name, resident, self.state)


class CloudManager:
    """The control-loop executor. One policy consultation runs at a time, so
    pool snapshots are consistent with enactment order; handle operations
    may be called from any number of application threads."""

    def __init__(
        self,
        registry: ClassRegistry,
        config: Optional[ManagerConfig] = None,
        policy: Optional[ScalingPolicy] = None,
        clock=None,
    ):
        self.config = config or ManagerConfig()
        self.registry = registry
        if clock is None:
            clock = VirtualClock() if self.config.backend == "simulated" else WallClock()
        self.clock = clock
        self.repository = MonitoringRepository()
        self.engine = MetricEngine(self.repository, clock)
        self.bus = EventBus(clock, engine=self.engine)
        self.globals = GlobalStore()
        self.artifacts = ArtifactStore()
        self.policy = policy or parse_policy(self.config.policy, self.config.max_hosts)
        self.backend: Optional[Backend] = None
        self._callback: Optional[CallbackServer] = None
        self._objects: dict[CloudObjectId, _ObjectRecord] = {}
        self._objects_lock = threading.Lock()
        self._object_ids = IdSource()
        self._scheduler = threading.RLock()
        self._billing_stop = threading.Event()
        self._billing_thread: Optional[threading.Thread] = None
        self._started = False

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "CloudManager":
        if self._started:
            return self
        btu = self.config.effective_billing_unit()
        if self.config.backend == "local":
            if not self.config.registry_spec:
                raise ValueError("local backend requires a registry spec (module:attr)")
            # Freshness check: the spec must resolve to this very registry,
            # or spawned hosts would reject our handshake anyway.
            if load_registry(self.config.registry_spec).digest() != self.registry.digest():
                raise ValueError(
                    f"registry spec {self.config.registry_spec!r} resolves to a "
                    "different registry than the one this manager holds"
                )
            host, _, port = self.config.listen_callback.rpartition(":")
            self._callback = CallbackServer(self, (host, int(port)))
            self._callback.start()
            self.backend = LocalBackend(
                clock=self.clock,
                emit=self.bus.emit,
                callback=self._callback,
                registry=self.registry,
                registry_spec=self.config.registry_spec,
                max_hosts=self.config.max_hosts,
                billing_time_unit_ms=btu,
            )
            self._billing_thread = threading.Thread(
                target=self._billing_loop, name="billing", daemon=True
            )
            self._billing_thread.start()
        else:
            backend = SimulatedBackend(
                clock=self.clock,
                emit=self.bus.emit,
                registry=self.registry,
                services_factory=lambda host_id: _DirectServices(self),
                artifact_origin=self.artifacts.get,
                max_hosts=self.config.max_hosts,
                billing_time_unit_ms=btu,
                startup_delay_ms=self.config.startup_delay_ms,
            )
            backend.bind(on_advance=self.engine.advance_to, on_billing=self.billing_tick)
            self.backend = backend
        self._maybe_enable_utilization()
        self._started = True
        return self

    def _maybe_enable_utilization(self) -> None:
        from .policy import ThresholdScaler

        if not isinstance(self.policy, ThresholdScaler):
            return
        window = WindowSpec(WindowKind.SLIDING, self.config.utilization_window_ms)
        self.engine.register(
            MonitoringMetric(
                UTILIZATION_METRIC,
                MetricType.FLOAT64,
                MetricStatement(Aggregate.AVG, "value", "custom.host.load", window),
            )
        )
        self.bus.add_tap(_UtilizationSampler(self, self.config.utilization_window_ms))

    def shutdown(self) -> None:
        self._billing_stop.set()
        if self._billing_thread is not None:
            self._billing_thread.join(timeout=2)
        if self.backend is not None:
            self.backend.shutdown()
        if self._callback is not None:
            self._callback.close()

    def __enter__(self) -> "CloudManager":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- events / metrics / globals / artifacts --------------------------------

    def subscribe_events(self, buffer_size: Optional[int] = None) -> EventSubscription:
        return self.bus.subscribe(buffer_size)

    def emit_event(
        self,
        event_type: str,
        properties: Optional[dict] = None,
        source: Optional[EventSource] = None,
    ) -> MonitoringEvent:
        """External event source entry point (also used for custom events)."""
        return self.bus.emit(
            MonitoringEvent(
                event_type, 0, source or EventSource.external(), properties or {}
            )
        )

    def register_metric(self, metric: MonitoringMetric) -> None:
        self.engine.register(metric)

    def query_metric(self, name: str):
        return self.repository.query(name)

    def global_get(self, name: str) -> Value:
        return self.globals.get(name)

    def global_set(self, name: str, value: Value) -> None:
        self.globals.set(name, value)

    def publish_artifact(self, payload: bytes) -> bytes:
        return self.artifacts.publish(payload)

    # -- pool view --------------------------------------------------------------

    def _resident_count(self, host_id: CloudHostId) -> int:
        with self._objects_lock:
            return sum(
                1
                for r in self._objects.values()
                if r.resident_on == host_id
                and r.state in (ObjectState.DEPLOYED, ObjectState.MIGRATING)
            )

    def host_pool_view(self) -> tuple:
        now = self.clock.now_ms()
        rows = []
        for record in self.backend.records():
            if record.state is not HostState.ONLINE:
                continue
            rows.append(
                HostView(
                    host_id=record.id,
                    endpoint=record.endpoint,
                    resident_objects=self._resident_count(record.id),
                    age_ms=now - record.provisioned_at,
                    ms_to_next_billing=max(0, record.next_billing_at - now),
                )
            )
        return tuple(sorted(rows, key=lambda h: h.host_id))

    # -- policy consultation ------------------------------------------------------

    def _consult(self, fn, *args):
        box: dict = {}

        def run():
            try:
                box["result"] = fn(*args)
            except Exception as e:  # noqa: BLE001 - surfaced as PolicyError
                box["error"] = e

        thread = threading.Thread(target=run, daemon=True)
        thread.start()
        thread.join(self.config.policy_deadline_ms / 1000.0)
        if thread.is_alive():
            raise PolicyError("policy did not return within the deadline")
        if "error" in box:
            raise PolicyError(f"policy raised: {box['error']}") from box["error"]
        return box["result"]

    def _consult_schedule(self, descriptor, pool) -> ScalingDecision:
        decision = self._consult(self.policy.on_schedule, descriptor, pool, self.repository)
        if not isinstance(decision, ScalingDecision):
            raise PolicyError(f"policy returned {type(decision).__name__}")
        return decision

    def _consult_billing(self, host_id, pool) -> BillingDecision:
        try:
            decision = self._consult(
                self.policy.on_billing_boundary, host_id, pool, self.repository
            )
        except PolicyError:
            return BillingDecision.KEEP  # conservative default for destruction
        if not isinstance(decision, BillingDecision):
            return BillingDecision.KEEP
        return decision

    def _validate_decision(self, decision: ScalingDecision, pool) -> None:
        pool_ids = {h.host_id for h in pool}
        if isinstance(decision.placement, UseExisting):
            if decision.placement.host_id not in pool_ids:
                raise PolicyError(
                    f"policy placed on host {decision.placement.host_id.hex} "
                    "which is not in the pool"
                )
        elif not isinstance(decision.placement, ProvisionNew):
            raise PolicyError("decision placement must be UseExisting or ProvisionNew")
        for co_id, dest in decision.migrations:
            with self._objects_lock:
                record = self._objects.get(co_id)
            if record is None or record.state is not ObjectState.DEPLOYED:
                raise PolicyError(f"migration names unknown or undeployed object {co_id}")
            if dest not in pool_ids:
                raise PolicyError(f"migration targets host {dest.hex} not in the pool")

    # -- manager events ------------------------------------------------------------

    def _emit_manager(self, event_type: str, props: dict) -> None:
        self.bus.emit(
            MonitoringEvent(event_type, 0, EventSource.manager(), props)
        )

    # -- scheduling / deployment ------------------------------------------------------

    def _resolve_arg(self, arg) -> Value:
        if isinstance(arg, CloudObjectHandle):
            return Ref(arg.id)
        if isinstance(arg, Value):
            return arg
        raise TypeError(
            f"arguments must be Values or CloudObjectHandles, got {type(arg).__name__}"
        )

    def handle_for(self, ref: Ref) -> CloudObjectHandle:
        with self._objects_lock:
            record = self._objects.get(ref.id)
        if record is None:
            raise ObjectDestroyed(ref.id.hex)
        return CloudObjectHandle(ref.id, record.class_name)

    def deploy_object(self, class_name: str, ctor_args: Sequence = ()) -> CloudObjectHandle:
        args = List(tuple(self._resolve_arg(a) for a in ctor_args))
        with self._scheduler:
            self.registry.get(class_name)  # UnknownClass before any side effect
            co_id = CloudObjectId(self._object_ids.next_value())
            descriptor = CloudObjectDescriptor(
                co_id, class_name, None, ObjectState.SCHEDULING
            )
            pool = self.host_pool_view()
            decision = self._consult_schedule(descriptor, pool)
            self._validate_decision(decision, pool)
            for mig_co, mig_dest in decision.migrations:
                self._migrate_locked(mig_co, mig_dest)
            fresh: Optional[CloudHostId] = None
            if isinstance(decision.placement, ProvisionNew):
                try:
                    record = self.backend.provision()
                    fresh = record.id
                    self.backend.wait_online(record.id)
                except ElastikitError as e:
                    if fresh is not None:
                        self._rollback_fresh(fresh)
                    raise ProvisionFailed(str(e)) from e
            else:
                record = self.backend.record(decision.placement.host_id)
            host_id = record.id
            self._emit_manager(
                "ObjectScheduledEvent",
                {
                    "co_id": Text(co_id.hex),
                    "class_name": Text(class_name),
                    "host_id": Text(host_id.hex),
                },
            )
            try:
                response = self.backend.link(host_id).request(DeployCO(descriptor, args))
                self._raise_on_err(response)
            except ElastikitError as e:
                if fresh is not None:
                    self._rollback_fresh(fresh)
                if isinstance(e, DeployFailed):
                    raise
                raise DeployFailed(str(e)) from e
            with self._objects_lock:
                self._objects[co_id] = _ObjectRecord(co_id, class_name, host_id)
            return CloudObjectHandle(co_id, class_name)

    def _rollback_fresh(self, host_id: CloudHostId) -> None:
        if self._resident_count(host_id) == 0:
            try:
                self.backend.terminate(host_id)
            except ElastikitError:
                pass

    @staticmethod
    def _raise_on_err(response: Message) -> Message:
        if isinstance(response, Err):
            raise from_wire_code(response.code, response.detail)
        return response

    # -- handle operations ---------------------------------------------------------

    def _route(self, co_id: CloudObjectId) -> tuple[_ObjectRecord, CloudHostId]:
        while True:
            with self._objects_lock:
                record = self._objects.get(co_id)
            if record is None:
                raise ObjectDestroyed(co_id.hex)
            with record.lock:
                state = record.state
                host_id = record.resident_on
                gate = record.gate
            if state is ObjectState.DESTROYED:
                raise ObjectDestroyed(co_id.hex)
            if state is ObjectState.MIGRATING:
                gate.wait()  # calls arriving during migration block, then reroute
                continue
            return record, host_id

    def _object_request(self, co_id: CloudObjectId, make_msg) -> Message:
        while True:
            record, host_id = self._route(co_id)
            response = self.backend.link(host_id).request(make_msg())
            if isinstance(response, Err) and response.code == "UnknownCO":
                # The object may have moved between routing and delivery;
                # retry only if its residency actually changed.
                with record.lock:
                    moved = record.resident_on != host_id
                if moved:
                    continue
            return response

    def invoke(self, handle: CloudObjectHandle, method: str, args: Sequence = ()) -> Value:
        wire_args = List(tuple(self._resolve_arg(a) for a in args))
        try:
            response = self._object_request(
                handle.id, lambda: InvokeCO(handle.id, method, wire_args)
            )
        except HostUnreachable:
            self.bus.emit(
                MonitoringEvent(
                    "ExecutionFailedEvent",
                    0,
                    EventSource.object(handle.id),
                    {
                        "co_id": Text(handle.id.hex),
                        "method": Text(method),
                        "error": Text("host unreachable"),
                    },
                )
            )
            raise
        return self._raise_on_err(response).value

    def get_field(self, handle: CloudObjectHandle, field: str) -> Value:
        response = self._object_request(handle.id, lambda: GetField(handle.id, field))
        return self._raise_on_err(response).value

    def set_field(self, handle: CloudObjectHandle, field: str, value) -> None:
        wire_value = self._resolve_arg(value)
        self._raise_on_err(
            self._object_request(
                handle.id, lambda: SetField(handle.id, field, wire_value)
            )
        )

    def destroy_object(self, handle: CloudObjectHandle) -> None:
        record, host_id = self._route(handle.id)
        with record.lock:
            if record.state is ObjectState.DESTROYED or record.destroying:
                raise ObjectDestroyed(handle.id.hex)
            record.destroying = True
        try:
            response = self.backend.link(host_id).request(DestroyCO(handle.id))
            self._raise_on_err(response)
        except ElastikitError:
            with record.lock:
                record.destroying = False
            raise
        with record.lock:
            record.state = ObjectState.DESTROYED
            record.resident_on = None
        self._emit_manager(
            "ObjectDestroyedEvent",
            {"co_id": Text(handle.id.hex), "host_id": Text(host_id.hex)},
        )

    def descriptor_of(self, handle: CloudObjectHandle) -> CloudObjectDescriptor:
        with self._objects_lock:
            record = self._objects.get(handle.id)
        if record is None:
            raise ObjectDestroyed(handle.id.hex)
        return record.descriptor()

    # -- migration -------------------------------------------------------------------

    def migrate(self, handle_or_id, dest: CloudHostId) -> None:
        co_id = handle_or_id.id if isinstance(handle_or_id, CloudObjectHandle) else handle_or_id
        with self._scheduler:
            self._migrate_locked(co_id, dest)

    def _migrate_locked(self, co_id: CloudObjectId, dest: CloudHostId) -> None:
        with self._objects_lock:
            record = self._objects.get(co_id)
        if record is None:
            raise UnknownCO(co_id.hex)
        with record.lock:
            if record.state is ObjectState.DESTROYED:
                raise ObjectDestroyed(co_id.hex)
            if record.state is not ObjectState.DEPLOYED:
                raise NotQuiescent(co_id.hex)
            source = record.resident_on
            if source == dest:
                return
            try:
                dest_record = self.backend.record(dest)
            except ElastikitError as e:
                raise DestUnreachable(str(e)) from e
            if dest_record.state is not HostState.ONLINE:
                raise DestUnreachable(dest.hex)
            record.state = ObjectState.MIGRATING
            record.gate.clear()
        started = self.clock.now_ms()
        try:
            source_link = self.backend.link(source)
            snapshot = self._raise_on_err(source_link.request(SnapshotCO(co_id)))
            state_bytes = snapshot.value.value  # Ok{Bytes}
            descriptor = CloudObjectDescriptor(
                co_id, record.class_name, dest, ObjectState.MIGRATING
            )
            try:
                response = self.backend.link(dest).request(
                    RestoreCO(descriptor, state_bytes)
                )
                self._raise_on_err(response)
            except (HostUnreachable, ElastikitError) as e:
                raise DestUnreachable(str(e)) from e
            try:
                source_link.request(DestroyCO(co_id))
            except ElastikitError:
                pass  # dest owns the object now; a dead source cannot answer anyway
            with record.lock:
                record.resident_on = dest
                record.state = ObjectState.DEPLOYED
            self._emit_manager(
                "ObjectMigratedEvent",
                {
                    "co_id": Text(co_id.hex),
                    "source": Text(source.hex),
                    "dest": Text(dest.hex),
                    "duration": Int64(self.clock.now_ms() - started),
                },
            )
        except BaseException:
            with record.lock:
                if record.state is ObjectState.MIGRATING:
                    record.state = ObjectState.DEPLOYED  # object remains on source
            raise
        finally:
            record.gate.set()

    # -- billing ------------------------------------------------------------------------

    def billing_tick(self, host_id: CloudHostId) -> None:
        with self._scheduler:
            try:
                record = self.backend.record(host_id)
            except ElastikitError:
                return
            if record.state is not HostState.ONLINE:
                return
            decision = self._consult_billing(host_id, self.host_pool_view())
            if decision is BillingDecision.KEEP:
                return
            residents = self._resident_count(host_id)
            if residents > 0:
                self._emit_manager(
                    "PolicyDecisionRejected",
                    {
                        "host_id": Text(host_id.hex),
                        "reason": Text(f"destroy refused: {residents} resident object(s)"),
                    },
                )
                return
            try:
                self.backend.terminate(host_id)
            except ElastikitError:
                pass

    def _billing_loop(self) -> None:
        while not self._billing_stop.wait(0.05):
            for record in self.backend.records():
                while (
                    record.state is HostState.ONLINE
                    and record.next_billing_at <= self.clock.now_ms()
                ):
                    record.next_billing_at += record.billing_time_unit
                    self.billing_tick(record.id)

    # -- simulated time ------------------------------------------------------------------

    def advance_clock(self, dt_ms: int) -> None:
        if not isinstance(self.backend, SimulatedBackend):
            raise RuntimeError("advance_clock is only available on the simulated backend")
        self.backend.advance_clock(dt_ms)
