"""Worker-host daemon: accepts object deployments, executes invocations in
per-object sandboxes, serves snapshots for migration, and emits lifecycle
events back to the manager.

The same execution core backs two transports: a TCP server for worker
processes (`elastikit-hostd`), and direct in-process calls for the
simulated backend.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import os
import signal
import socket
import sys
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from . import wire
from .artifacts import ArtifactCache
from .core import (
    BY_REFERENCE,
    BY_VALUE,
    Bytes,
    CloudHostId,
    CloudObjectDescriptor,
    CloudObjectId,
    Int64,
    List,
    Map,
    Null,
    ObjectState,
    PassingMode,
    Ref,
    Text,
    Value,
    decode_value,
    encode_value,
)
from .errors import (
    ApplicationError,
    ArityMismatch,
    ConnectionClosed,
    ConstructorFailed,
    DuplicateCO,
    ElastikitError,
    NotQuiescent,
    SnapshotUnsupported,
    UnknownClass,
    UnknownCO,
    UnknownField,
    UnknownMethod,
    from_wire_code,
    wire_code,
)
from .events import EventSource, MonitoringEvent, WallClock
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

_MUTABLE_STATICS = (list, dict, set, bytearray)


@dataclass(frozen=True)
class MethodSpec:
    """One invocable method: callable plus declared passing modes.

    func is called as func(instance, *args) with Value arguments and must
    return a Value (None is accepted as shorthand for Null).
    """

    func: Callable
    params: tuple = ()
    returns: Optional[PassingMode] = BY_VALUE


@dataclass(frozen=True)
class CloudClass:
    """Registration record for one deployable class.

    factory is called as factory(ctx, *args); registered fields are
    instance attributes of the same name holding Values. snapshot(instance)
    returns a Value, restore(ctx, value) rebuilds an instance; classes
    registered without them cannot migrate.
    """

    name: str
    factory: Callable
    ctor_params: tuple = ()
    methods: Mapping[str, MethodSpec] = field(default_factory=dict)
    fields: Mapping[str, PassingMode] = field(default_factory=dict)
    snapshot: Optional[Callable] = None
    restore: Optional[Callable] = None


class ClassRegistry:
    """Identical registry contents must exist on manager and all hosts;
    equality is checked via digest() at connection handshake."""

    def __init__(self):
        self._classes: dict[str, CloudClass] = {}

    def register(self, cls: CloudClass) -> None:
        if cls.name in self._classes:
            raise ValueError(f"class {cls.name!r} already registered")
        if (cls.snapshot is None) != (cls.restore is None):
            raise ValueError("snapshot and restore must be registered together")
        if isinstance(cls.factory, type):
            self._reject_mutable_statics(cls.factory)
        self._classes[cls.name] = cls

    @staticmethod
    def _reject_mutable_statics(factory: type) -> None:
        # Host-local class statics are forbidden: mutation on one host would
        # silently diverge from the others. Shared state must use globals.
        for name, attr in vars(factory).items():
            if name.startswith("__"):
                continue
            if isinstance(attr, _MUTABLE_STATICS):
                raise ValueError(
                    f"{factory.__name__}.{name} is a mutable class attribute; "
                    "registered classes must keep shared state in globals"
                )

    def get(self, name: str) -> CloudClass:
        cls = self._classes.get(name)
        if cls is None:
            raise UnknownClass(name)
        return cls

    def __contains__(self, name: str) -> bool:
        return name in self._classes

    def names(self) -> list[str]:
        return sorted(self._classes)

    def digest(self) -> bytes:
        lines = []
        for name in sorted(self._classes):
            cls = self._classes[name]
            lines.append(f"class {name}")
            lines.append("  ctor " + ",".join(p.value for p in cls.ctor_params))
            for mname in sorted(cls.methods):
                spec = cls.methods[mname]
                params = ",".join(p.value for p in spec.params)
                ret = spec.returns.value if spec.returns is not None else "none"
                lines.append(f"  method {mname}({params})->{ret}")
            for fname in sorted(cls.fields):
                lines.append(f"  field {fname}:{cls.fields[fname].value}")
            lines.append(f"  snapshot {'yes' if cls.snapshot else 'no'}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).digest()


def load_registry(spec: str) -> ClassRegistry:
    """Resolve `module:attr` to a ClassRegistry (attr may be a zero-arg
    callable producing one)."""
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ValueError(f"registry spec must be module:attr, got {spec!r}")
    obj = getattr(importlib.import_module(module_name), attr)
    if callable(obj) and not isinstance(obj, ClassRegistry):
        obj = obj()
    if not isinstance(obj, ClassRegistry):
        raise TypeError(f"{spec} is not a ClassRegistry")
    return obj


class HostServices:
    """Manager-facing services available to a host (callback direction)."""

    def emit_event(self, event: MonitoringEvent) -> None:
        raise NotImplementedError

    def global_get(self, name: str) -> Value:
        raise NotImplementedError

    def global_set(self, name: str, value: Value) -> None:
        raise NotImplementedError

    def fetch_artifact(self, digest: bytes) -> bytes:
        raise NotImplementedError


class HostContext:
    """Per-object handle to the surrounding infrastructure, passed to
    factories: globals, custom events, and artifact fetches."""

    def __init__(self, co_id: CloudObjectId, core: "HostCore", view: set):
        self.co_id = co_id
        self._core = core
        self._view = view

    def global_get(self, name: str) -> Value:
        return self._core.services.global_get(name)

    def global_set(self, name: str, value: Value) -> None:
        self._core.services.global_set(name, value)

    def emit(self, event_type: str, properties: Optional[dict] = None) -> None:
        if not event_type.startswith("custom."):
            raise ValueError("application events must use the custom. prefix")
        self._core.emit(
            MonitoringEvent(
                event_type, 0, EventSource.object(self.co_id), properties or {}
            )
        )

    def fetch_artifact(self, digest: bytes) -> bytes:
        payload = self._core.cache.fetch(digest)
        self._view.add(digest)
        return payload


class _Sandbox:
    """One resident object: its instance, serial execution lane, and the
    artifact digests pinned on its behalf."""

    def __init__(self, co_id: CloudObjectId, class_name: str):
        self.co_id = co_id
        self.class_name = class_name
        self.instance = None
        self.lane = threading.Lock()
        self.artifact_view: set = set()
        self.ready = False


def _contains_ref(v: Value) -> bool:
    if isinstance(v, Ref):
        return True
    if isinstance(v, List):
        return any(_contains_ref(item) for item in v.items)
    if isinstance(v, Map):
        return any(_contains_ref(item) for item in v.entries.values())
    return False


def _check_modes(what: str, declared: tuple, args: List) -> None:
    # Null stands for "no object" in by-reference positions.
    if len(args) != len(declared):
        raise ArityMismatch(
            f"{what} takes {len(declared)} argument(s), got {len(args)}"
        )
    for i, (mode, arg) in enumerate(zip(declared, args)):
        if mode is BY_REFERENCE and not isinstance(arg, (Ref, Null)):
            raise ArityMismatch(f"{what} argument {i} must be a Ref (by-reference)")
        if mode is BY_VALUE and _contains_ref(arg):
            raise ArityMismatch(
                f"{what} argument {i} is by-value and must not contain Refs"
            )


def _check_return(what: str, mode: Optional[PassingMode], result) -> Value:
    if result is None:
        result = Null()
    if not isinstance(result, Value):
        raise ApplicationError(f"{what} returned {type(result).__name__}, not a Value")
    if mode is None:
        if not isinstance(result, Null):
            raise ApplicationError(f"{what} is declared void but returned a value")
    elif mode is BY_REFERENCE:
        if not isinstance(result, (Ref, Null)):
            raise ApplicationError(f"{what} must return a Ref (by-reference)")
    elif _contains_ref(result):
        raise ApplicationError(f"{what} returns by value and must not contain Refs")
    return result


class HostCore:
    """Transport-independent host runtime: sandbox table plus the message
    handlers. Invocations on one object run serially; distinct objects run
    concurrently."""

    def __init__(
        self,
        host_id: CloudHostId,
        registry: ClassRegistry,
        services: HostServices,
        cache: ArtifactCache,
        clock=None,
    ):
        self.host_id = host_id
        self.registry = registry
        self.services = services
        self.cache = cache
        self.clock = clock or WallClock()
        self._sandboxes: dict[CloudObjectId, _Sandbox] = {}
        self._table_lock = threading.Lock()

    # -- events -------------------------------------------------------------

    def emit(self, event: MonitoringEvent) -> None:
        try:
            self.services.emit_event(event)
        except (ConnectionClosed, OSError):
            pass  # monitoring must never fail an invocation

    def _emit_host(self, event_type: str, props: Optional[dict] = None) -> None:
        self.emit(
            MonitoringEvent(event_type, 0, EventSource.host(self.host_id), props or {})
        )

    def _emit_object(self, co_id, event_type: str, props: dict) -> None:
        self.emit(MonitoringEvent(event_type, 0, EventSource.object(co_id), props))

    # -- lifecycle ------------------------------------------------------------

    def resident_ids(self) -> list[CloudObjectId]:
        with self._table_lock:
            return [s.co_id for s in self._sandboxes.values() if s.ready]

    def _claim(self, co_id: CloudObjectId, class_name: str) -> _Sandbox:
        with self._table_lock:
            if co_id in self._sandboxes:
                raise DuplicateCO(co_id.hex)
            sandbox = _Sandbox(co_id, class_name)
            self._sandboxes[co_id] = sandbox
            return sandbox

    def _lookup(self, co_id: CloudObjectId) -> _Sandbox:
        with self._table_lock:
            sandbox = self._sandboxes.get(co_id)
            if sandbox is None or not sandbox.ready:
                raise UnknownCO(co_id.hex)
            return sandbox

    def _abandon(self, co_id: CloudObjectId) -> None:
        with self._table_lock:
            self._sandboxes.pop(co_id, None)

    def deploy(self, descriptor: CloudObjectDescriptor, ctor_args: List) -> None:
        cls = self.registry.get(descriptor.class_name)
        _check_modes(f"{cls.name} constructor", cls.ctor_params, ctor_args)
        sandbox = self._claim(descriptor.id, cls.name)
        ctx = HostContext(descriptor.id, self, sandbox.artifact_view)
        started = self.clock.now_ms()
        try:
            sandbox.instance = cls.factory(ctx, *ctor_args.items)
        except Exception as e:
            self._abandon(descriptor.id)
            raise ConstructorFailed(f"{type(e).__name__}: {e}") from e
        sandbox.ready = True
        self._emit_host(
            "ObjectDeployedEvent",
            {
                "co_id": Text(descriptor.id.hex),
                "host_id": Text(self.host_id.hex),
                "duration": Int64(self.clock.now_ms() - started),
            },
        )

    def invoke(self, co_id: CloudObjectId, method: str, args: List) -> Value:
        sandbox = self._lookup(co_id)
        cls = self.registry.get(sandbox.class_name)
        spec = cls.methods.get(method)
        if spec is None:
            raise UnknownMethod(f"{sandbox.class_name}.{method}")
        _check_modes(f"{sandbox.class_name}.{method}", spec.params, args)
        with sandbox.lane:
            self._emit_object(
                co_id,
                "ExecutionStarted",
                {"co_id": Text(co_id.hex), "method": Text(method)},
            )
            started = self.clock.now_ms()
            try:
                result = spec.func(sandbox.instance, *args.items)
            except Exception as e:
                error_text = f"{type(e).__name__}: {e}"
                self._emit_object(
                    co_id,
                    "ExecutionFailedEvent",
                    {
                        "co_id": Text(co_id.hex),
                        "method": Text(method),
                        "error": Text(error_text),
                    },
                )
                raise ApplicationError(error_text) from e
            result = _check_return(f"{sandbox.class_name}.{method}", spec.returns, result)
            self._emit_object(
                co_id,
                "ExecutionFinished",
                {
                    "co_id": Text(co_id.hex),
                    "method": Text(method),
                    "duration": Int64(self.clock.now_ms() - started),
                },
            )
            return result

    def _field_mode(self, sandbox: _Sandbox, name: str) -> PassingMode:
        cls = self.registry.get(sandbox.class_name)
        mode = cls.fields.get(name)
        if mode is None:
            raise UnknownField(f"{sandbox.class_name}.{name}")
        return mode

    def get_field(self, co_id: CloudObjectId, name: str) -> Value:
        sandbox = self._lookup(co_id)
        mode = self._field_mode(sandbox, name)
        with sandbox.lane:
            try:
                value = getattr(sandbox.instance, name)
            except AttributeError as e:
                raise ApplicationError(f"field {name!r} is not set on the instance") from e
        if not isinstance(value, Value):
            raise ApplicationError(f"field {name!r} does not hold a Value")
        if mode is BY_REFERENCE and not isinstance(value, (Ref, Null)):
            raise ApplicationError(f"field {name!r} is by-reference but holds no Ref")
        if mode is BY_VALUE and _contains_ref(value):
            raise ApplicationError(f"field {name!r} is by-value but contains Refs")
        return value

    def set_field(self, co_id: CloudObjectId, name: str, value: Value) -> None:
        sandbox = self._lookup(co_id)
        mode = self._field_mode(sandbox, name)
        _check_modes(f"field {name}", (mode,), List((value,)))
        with sandbox.lane:
            setattr(sandbox.instance, name, value)

    def snapshot(self, co_id: CloudObjectId) -> bytes:
        sandbox = self._lookup(co_id)
        cls = self.registry.get(sandbox.class_name)
        if cls.snapshot is None:
            raise SnapshotUnsupported(sandbox.class_name)
        if not sandbox.lane.acquire(blocking=False):
            raise NotQuiescent(co_id.hex)
        try:
            state = cls.snapshot(sandbox.instance)
        except Exception as e:
            raise ApplicationError(f"{type(e).__name__}: {e}") from e
        finally:
            sandbox.lane.release()
        if not isinstance(state, Value):
            raise ApplicationError("snapshot must return a Value")
        return encode_value(state)

    def restore(self, descriptor: CloudObjectDescriptor, state: bytes) -> None:
        cls = self.registry.get(descriptor.class_name)
        if cls.restore is None:
            raise SnapshotUnsupported(descriptor.class_name)
        sandbox = self._claim(descriptor.id, cls.name)
        ctx = HostContext(descriptor.id, self, sandbox.artifact_view)
        try:
            sandbox.instance = cls.restore(ctx, decode_value(state))
        except ElastikitError:
            self._abandon(descriptor.id)
            raise
        except Exception as e:
            self._abandon(descriptor.id)
            raise ApplicationError(f"{type(e).__name__}: {e}") from e
        sandbox.ready = True

    def destroy(self, co_id: CloudObjectId) -> None:
        with self._table_lock:
            sandbox = self._sandboxes.pop(co_id, None)
        if sandbox is None:
            raise UnknownCO(co_id.hex)
        sandbox.instance = None  # release the application object

    # -- wire dispatch ---------------------------------------------------------

    def handle_message(self, msg: Message) -> Message:
        try:
            if isinstance(msg, DeployCO):
                self.deploy(msg.descriptor, msg.ctor_args)
                return Ok(Null())
            if isinstance(msg, InvokeCO):
                return Ok(self.invoke(msg.co_id, msg.method, msg.args))
            if isinstance(msg, GetField):
                return Ok(self.get_field(msg.co_id, msg.field))
            if isinstance(msg, SetField):
                self.set_field(msg.co_id, msg.field, msg.value)
                return Ok(Null())
            if isinstance(msg, SnapshotCO):
                return Ok(Bytes(self.snapshot(msg.co_id)))
            if isinstance(msg, RestoreCO):
                self.restore(msg.descriptor, msg.state)
                return Ok(Null())
            if isinstance(msg, DestroyCO):
                self.destroy(msg.co_id)
                return Ok(Null())
            return Err("UnsupportedMessage", type(msg).__name__)
        except ElastikitError as e:
            return Err(wire_code(e), str(e))
        except Exception as e:  # application bugs must not kill the daemon
            return Err("InternalError", f"{type(e).__name__}: {e}")


class HostServer:
    """TCP front end over a HostCore. Each accepted connection handshakes
    (protocol version + registry digest), then frames are dispatched to a
    worker thread per request."""

    def __init__(self, core: HostCore, listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.core = core
        self._listen_addr = listen
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._conns: list[Connection] = []
        self._conns_lock = threading.Lock()
        self._shutdown = threading.Event()

    def start(self) -> tuple[str, int]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind(self._listen_addr)
        except OSError as e:
            listener.close()
            raise OSError(f"cannot bind {self._listen_addr}: {e}") from e
        listener.listen(16)
        self._listener = listener
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="hostd-accept", daemon=True
        )
        self._accept_thread.start()
        host, port = listener.getsockname()
        self.core._emit_host("HostOnline", {"endpoint": Text(f"{host}:{port}")})
        return host, port

    def endpoint(self) -> tuple[str, int]:
        return self._listener.getsockname()

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
            version, digest, _ = wire.read_handshake(rfile)
        except (ConnectionClosed, OSError):
            sock.close()
            return
        if version != wire.PROTOCOL_VERSION:
            sock.sendall(
                wire.encode_frame(Err("ProtocolMismatch", f"got version {version}"), 0)
            )
            sock.close()
            return
        if digest != self.core.registry.digest():
            sock.sendall(
                wire.encode_frame(
                    Err("RegistryMismatch", "registry digests differ"), 0
                )
            )
            sock.close()
            return
        sock.sendall(wire.encode_frame(Ok(Null()), 0))
        conn = Connection(sock, handler=self._handle, on_close=self._forget, rfile=rfile)
        with self._conns_lock:
            self._conns.append(conn)
        conn.start()

    def _forget(self, conn: Connection) -> None:
        with self._conns_lock:
            if conn in self._conns:
                self._conns.remove(conn)

    def _handle(self, conn: Connection, msg: Message, request_id: int) -> None:
        def run():
            response = self.core.handle_message(msg)
            try:
                conn.respond(request_id, response)
            except ConnectionClosed:
                pass

        threading.Thread(target=run, daemon=True).start()

    def shutdown(self) -> None:
        if self._shutdown.is_set():
            return
        self._shutdown.set()
        self.core._emit_host("HostOffline")
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()


class _CallbackServices(HostServices):
    """HostServices over the callback connection to the manager."""

    def __init__(self, conn: Connection):
        self._conn = conn

    def emit_event(self, event: MonitoringEvent) -> None:
        self._conn.push(EventPush(event))

    def _request(self, msg: Message) -> Message:
        response = self._conn.request(msg)
        if isinstance(response, Err):
            raise from_wire_code(response.code, response.detail)
        return response

    def global_get(self, name: str) -> Value:
        return self._request(GlobalGet(name)).value

    def global_set(self, name: str, value: Value) -> None:
        self._request(GlobalSet(name, value))

    def fetch_artifact(self, digest: bytes) -> bytes:
        response = self._request(ArtifactFetch(digest))
        if not isinstance(response, ArtifactData):
            raise ApplicationError("unexpected artifact response")
        return response.payload


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="elastikit-hostd")
    parser.add_argument("--listen", required=True, help="host:port to serve on")
    parser.add_argument("--callback", required=True, help="manager callback endpoint")
    parser.add_argument("--registry", required=True, help="module:attr of the ClassRegistry")
    parser.add_argument("--host-id", required=True, help="assigned host id (32 hex chars)")
    parser.add_argument("--cache-budget", type=int, default=None)
    args = parser.parse_args(argv)

    registry = load_registry(args.registry)
    host_id = CloudHostId.from_bytes(bytes.fromhex(args.host_id))

    callback_sock = socket.create_connection(_parse_endpoint(args.callback), timeout=10)
    callback_sock.settimeout(None)
    wire.send_handshake(callback_sock, registry.digest(), host_id)

    done = threading.Event()

    def on_callback_lost(_conn):
        if not done.is_set():
            os._exit(1)  # manager is gone; do not linger as an orphan

    callback = Connection(callback_sock, on_close=on_callback_lost, name="callback")
    response, _ = callback.read_frame()
    if not isinstance(response, Ok):
        print(f"callback handshake rejected: {response}", file=sys.stderr)
        return 2
    callback.start()
    services = _CallbackServices(callback)
    cache_kwargs = {} if args.cache_budget is None else {"budget_bytes": args.cache_budget}
    cache = ArtifactCache(services.fetch_artifact, **cache_kwargs)
    core = HostCore(host_id, registry, services, cache)
    server = HostServer(core, _parse_endpoint(args.listen))

    def on_term(_signum, _frame):
        done.set()
        server.shutdown()

    signal.signal(signal.SIGTERM, on_term)
    signal.signal(signal.SIGINT, on_term)
    server.start()
    done.wait()
    return 0
