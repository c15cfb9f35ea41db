"""Provisioning backends: worker processes on the local machine, and fully
virtual in-process hosts driven by a simulated clock.

Both present the same surface to the manager (provision / wait_online /
link / terminate), so a scenario script produces the same event-type
sequence on either one.
"""

from __future__ import annotations

import socket
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import wire
from .artifacts import ArtifactCache
from .core import CloudHostId, IdSource, Text
from .errors import (
    ConnectionClosed,
    HostUnreachable,
    QuotaExceeded,
    RegistryMismatch,
    SpawnFailure,
    StartTimeout,
    UnknownHost,
)
from .events import EventSource, MonitoringEvent, VirtualClock
from .hostd import ClassRegistry, HostCore, HostServices
from .wire import Connection, Err, Message, Ok

DEFAULT_BILLING_UNIT_LOCAL_MS = 30_000
DEFAULT_BILLING_UNIT_SIMULATED_MS = 60_000
DEFAULT_STARTUP_DELAY_MS = 2_000

PROVISION_TIMEOUT_S = 10.0
TERMINATE_GRACE_S = 5.0


class HostState(Enum):
    STARTING = "starting"
    ONLINE = "online"
    TERMINATING = "terminating"
    GONE = "gone"


_ALLOWED_TRANSITIONS = {
    HostState.STARTING: {HostState.ONLINE, HostState.GONE},
    HostState.ONLINE: {HostState.TERMINATING, HostState.GONE},
    HostState.TERMINATING: {HostState.GONE},
    HostState.GONE: set(),
}


@dataclass
class CloudHostRecord:
    """One provisioned worker host as the manager sees it."""

    id: CloudHostId
    endpoint: str
    provisioned_at: int
    billing_time_unit: int
    state: HostState
    size_tag: str = ""
    next_billing_at: int = 0

    def transition(self, new: HostState) -> None:
        if new not in _ALLOWED_TRANSITIONS[self.state]:
            raise ValueError(f"illegal host state transition {self.state} -> {new}")
        self.state = new


class HostLink:
    """Request pipe from the manager to one host."""

    def request(self, msg: Message) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass


class Backend:
    """Common bookkeeping for provisioning backends."""

    def __init__(self, clock, emit: Callable[[MonitoringEvent], None],
                 max_hosts: int, billing_time_unit_ms: int):
        self.clock = clock
        self.emit = emit
        self.max_hosts = max_hosts
        self.billing_time_unit_ms = billing_time_unit_ms
        self._ids = IdSource()
        self._records: dict[CloudHostId, CloudHostRecord] = {}
        self._lock = threading.Lock()

    def records(self) -> list[CloudHostRecord]:
        with self._lock:
            return list(self._records.values())

    def record(self, host_id: CloudHostId) -> CloudHostRecord:
        with self._lock:
            record = self._records.get(host_id)
        if record is None or record.state is HostState.GONE:
            raise UnknownHost(host_id.hex)
        return record

    def active_count(self) -> int:
        with self._lock:
            return sum(
                1
                for r in self._records.values()
                if r.state in (HostState.STARTING, HostState.ONLINE)
            )

    def _new_record(self, size_tag: str) -> CloudHostRecord:
        if self.active_count() >= self.max_hosts:
            raise QuotaExceeded(f"pool is at max_hosts={self.max_hosts}")
        host_id = CloudHostId(self._ids.next_value())
        now = self.clock.now_ms()
        record = CloudHostRecord(
            id=host_id,
            endpoint="",
            provisioned_at=now,
            billing_time_unit=self.billing_time_unit_ms,
            state=HostState.STARTING,
            size_tag=size_tag,
            next_billing_at=now + self.billing_time_unit_ms,
        )
        with self._lock:
            self._records[host_id] = record
        self.emit(
            MonitoringEvent(
                "HostProvisionRequested",
                0,
                EventSource.manager(),
                {"host_id": Text(host_id.hex)},
            )
        )
        return record

    def _emit_terminated(self, host_id: CloudHostId) -> None:
        self.emit(
            MonitoringEvent(
                "HostTerminatedEvent",
                0,
                EventSource.manager(),
                {"host_id": Text(host_id.hex)},
            )
        )

    # Interface the manager programs against.

    def provision(self, size_tag: str = "") -> CloudHostRecord:
        raise NotImplementedError

    def wait_online(self, host_id: CloudHostId, timeout_s: float = PROVISION_TIMEOUT_S) -> None:
        raise NotImplementedError

    def link(self, host_id: CloudHostId) -> HostLink:
        raise NotImplementedError

    def terminate(self, host_id: CloudHostId) -> None:
        raise NotImplementedError

    def shutdown(self) -> None:
        pass


# --- local backend: worker processes ----------------------------------------

class ProcessHostLink(HostLink):
    def __init__(self, conn: Connection):
        self.conn = conn

    def request(self, msg: Message) -> Message:
        try:
            return self.conn.request(msg)
        except ConnectionClosed as e:
            raise HostUnreachable(str(e)) from e

    def close(self) -> None:
        self.conn.close()


class LocalBackend(Backend):
    """Runs each host as an `elastikit-hostd` process on this machine.

    The callback server (owned by the manager) reports when a spawned host
    comes online and hands us its listening endpoint.
    """

    def __init__(
        self,
        clock,
        emit,
        callback,  # manager's callback server: endpoint, wait_online, wait_offline
        registry: ClassRegistry,
        registry_spec: str,
        max_hosts: int = 8,
        billing_time_unit_ms: int = DEFAULT_BILLING_UNIT_LOCAL_MS,
    ):
        super().__init__(clock, emit, max_hosts, billing_time_unit_ms)
        self._callback = callback
        self._registry = registry
        self._registry_spec = registry_spec
        self._procs: dict[CloudHostId, subprocess.Popen] = {}
        self._links: dict[CloudHostId, ProcessHostLink] = {}

    def provision(self, size_tag: str = "") -> CloudHostRecord:
        record = self._new_record(size_tag)
        argv = [
            sys.executable,
            "-m",
            "elastikit.hostd_main",
            "--listen",
            "127.0.0.1:0",
            "--callback",
            self._callback.endpoint_text(),
            "--registry",
            self._registry_spec,
            "--host-id",
            record.id.hex,
        ]
        try:
            proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL)
        except OSError as e:
            record.transition(HostState.GONE)
            raise SpawnFailure(str(e)) from e
        self._procs[record.id] = proc
        try:
            endpoint = self._wait_spawn(proc, record.id)
            link = self._connect(endpoint)
        except Exception:
            proc.kill()
            proc.wait()
            record.transition(HostState.GONE)
            raise
        self._links[record.id] = link
        record.endpoint = endpoint
        record.transition(HostState.ONLINE)
        return record

    def _wait_spawn(self, proc: subprocess.Popen, host_id: CloudHostId) -> str:
        """Wait for the spawned host to report online; fail fast if it dies."""
        deadline = PROVISION_TIMEOUT_S
        step = 0.2
        waited = 0.0
        while waited < deadline:
            endpoint = self._callback.wait_host_online(host_id, step)
            if endpoint is not None:
                return endpoint
            waited += step
            if proc.poll() is not None:
                raise SpawnFailure(
                    f"host process exited with code {proc.returncode} before coming online"
                )
        raise StartTimeout(f"host {host_id.hex} not online after {deadline}s")

    def _connect(self, endpoint: str) -> ProcessHostLink:
        host, _, port = endpoint.rpartition(":")
        try:
            sock = socket.create_connection((host, int(port)), timeout=PROVISION_TIMEOUT_S)
            sock.settimeout(None)
            wire.send_handshake(sock, self._registry.digest())
            conn = Connection(sock, name=f"host-{endpoint}")
            response, _ = conn.read_frame()
        except (OSError, ConnectionClosed) as e:
            raise SpawnFailure(f"cannot reach spawned host at {endpoint}: {e}") from e
        if isinstance(response, Err):
            sock.close()
            raise RegistryMismatch(response.detail)
        conn.start()
        return ProcessHostLink(conn)

    def wait_online(self, host_id: CloudHostId, timeout_s: float = PROVISION_TIMEOUT_S) -> None:
        record = self.record(host_id)
        if record.state is not HostState.ONLINE:
            raise StartTimeout(f"host {host_id.hex} is {record.state.value}")

    def link(self, host_id: CloudHostId) -> HostLink:
        link = self._links.get(host_id)
        if link is None:
            raise UnknownHost(host_id.hex)
        return link

    def terminate(self, host_id: CloudHostId) -> None:
        record = self.record(host_id)
        if record.state is not HostState.ONLINE:
            raise UnknownHost(host_id.hex)
        record.transition(HostState.TERMINATING)
        proc = self._procs.pop(host_id, None)
        if proc is not None:
            proc.terminate()
            try:
                proc.wait(TERMINATE_GRACE_S)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        # Give the HostOffline event a chance to land before the terminated
        # event so traces order the two consistently across backends.
        self._callback.wait_host_offline(host_id, 2.0)
        link = self._links.pop(host_id, None)
        if link is not None:
            link.close()
        record.transition(HostState.GONE)
        self._emit_terminated(host_id)

    def crash(self, host_id: CloudHostId) -> None:
        """Fault injection: kill the worker with no grace and no events."""
        proc = self._procs.pop(host_id, None)
        if proc is not None:
            proc.kill()
            proc.wait()
        record = self.record(host_id)
        record.transition(HostState.GONE)
        link = self._links.pop(host_id, None)
        if link is not None:
            link.close()

    def shutdown(self) -> None:
        for record in self.records():
            if record.state in (HostState.STARTING, HostState.ONLINE):
                proc = self._procs.pop(record.id, None)
                if proc is not None:
                    proc.terminate()
                    try:
                        proc.wait(TERMINATE_GRACE_S)
                    except subprocess.TimeoutExpired:
                        proc.kill()
                        proc.wait()
                link = self._links.pop(record.id, None)
                if link is not None:
                    link.close()
                record.state = HostState.GONE


# --- simulated backend: virtual hosts, virtual time ---------------------------

class InprocHostLink(HostLink):
    def __init__(self, record: CloudHostRecord, core: HostCore):
        self._record = record
        self._core = core

    def request(self, msg: Message) -> Message:
        if self._record.state is not HostState.ONLINE:
            raise HostUnreachable(f"host {self._record.id.hex} is {self._record.state.value}")
        return self._core.handle_message(msg)


@dataclass
class _SimHost:
    record: CloudHostRecord
    core: HostCore
    online_at: int
    link: InprocHostLink = field(init=False)

    def __post_init__(self):
        self.link = InprocHostLink(self.record, self.core)


class SimulatedBackend(Backend):
    """In-process virtual hosts on a shared virtual clock.

    advance_clock() is the only source of time: it completes pending
    startups and fires billing boundaries in deterministic order (time,
    then host id), interleaved with metric-window closes via on_advance.
    """

    def __init__(
        self,
        clock: VirtualClock,
        emit,
        registry: ClassRegistry,
        services_factory: Callable[[CloudHostId], HostServices],
        artifact_origin: Callable[[bytes], bytes],
        max_hosts: int = 8,
        billing_time_unit_ms: int = DEFAULT_BILLING_UNIT_SIMULATED_MS,
        startup_delay_ms: int = DEFAULT_STARTUP_DELAY_MS,
    ):
        super().__init__(clock, emit, max_hosts, billing_time_unit_ms)
        self._registry = registry
        self._services_factory = services_factory
        self._artifact_origin = artifact_origin
        self.startup_delay_ms = startup_delay_ms
        self._hosts: dict[CloudHostId, _SimHost] = {}
        self._on_advance: Optional[Callable[[int], None]] = None
        self._on_billing: Optional[Callable[[CloudHostId], None]] = None
        self._step_lock = threading.RLock()

    def bind(self, on_advance: Callable[[int], None],
             on_billing: Callable[[CloudHostId], None]) -> None:
        self._on_advance = on_advance
        self._on_billing = on_billing

    def provision(self, size_tag: str = "") -> CloudHostRecord:
        with self._step_lock:
            record = self._new_record(size_tag)
            core = HostCore(
                record.id,
                self._registry,
                self._services_factory(record.id),
                ArtifactCache(self._artifact_origin),
                clock=self.clock,
            )
            sim = _SimHost(record, core, online_at=self.clock.now_ms() + self.startup_delay_ms)
            self._hosts[record.id] = sim
            if self.startup_delay_ms == 0:
                self._complete_startup(sim)
            return record

    def _complete_startup(self, sim: _SimHost) -> None:
        sim.record.endpoint = f"sim://{sim.record.id.hex[:12]}"
        sim.record.transition(HostState.ONLINE)
        # Anchor billing at provision time but never fire boundaries that
        # passed while the host was still starting.
        now = self.clock.now_ms()
        while sim.record.next_billing_at <= now:
            sim.record.next_billing_at += sim.record.billing_time_unit
        sim.core._emit_host("HostOnline", {"endpoint": Text(sim.record.endpoint)})

    def wait_online(self, host_id: CloudHostId, timeout_s: float = PROVISION_TIMEOUT_S) -> None:
        sim = self._hosts.get(host_id)
        if sim is None:
            raise UnknownHost(host_id.hex)
        if sim.record.state is HostState.ONLINE:
            return
        if sim.record.state is not HostState.STARTING:
            raise StartTimeout(f"host {host_id.hex} is {sim.record.state.value}")
        self._advance_to(sim.online_at)

    def advance_clock(self, dt_ms: int) -> None:
        if dt_ms < 0:
            raise ValueError("cannot advance by a negative duration")
        self._advance_to(self.clock.now_ms() + dt_ms)

    def _advance_to(self, target: int) -> None:
        with self._step_lock:
            while True:
                next_t = self._next_happening()
                if next_t is None or next_t > target:
                    break
                if next_t > self.clock.now_ms():
                    self.clock.advance_to(next_t)
                    if self._on_advance is not None:
                        self._on_advance(next_t)
                self._fire_due(self.clock.now_ms())
            if target > self.clock.now_ms():
                self.clock.advance_to(target)
                if self._on_advance is not None:
                    self._on_advance(target)

    def _next_happening(self) -> Optional[int]:
        times = []
        for sim in self._hosts.values():
            if sim.record.state is HostState.STARTING:
                times.append(sim.online_at)
            elif sim.record.state is HostState.ONLINE:
                times.append(sim.record.next_billing_at)
        return min(times) if times else None

    def _fire_due(self, now: int) -> None:
        for sim in sorted(self._hosts.values(), key=lambda s: s.record.id):
            if sim.record.state is HostState.STARTING and sim.online_at <= now:
                self._complete_startup(sim)
        for sim in sorted(self._hosts.values(), key=lambda s: s.record.id):
            while (
                sim.record.state is HostState.ONLINE
                and sim.record.next_billing_at <= now
            ):
                sim.record.next_billing_at += sim.record.billing_time_unit
                if self._on_billing is not None:
                    self._on_billing(sim.record.id)

    def link(self, host_id: CloudHostId) -> HostLink:
        sim = self._hosts.get(host_id)
        if sim is None:
            raise UnknownHost(host_id.hex)
        return sim.link

    def terminate(self, host_id: CloudHostId) -> None:
        record = self.record(host_id)
        if record.state is not HostState.ONLINE:
            raise UnknownHost(host_id.hex)
        sim = self._hosts[host_id]
        record.transition(HostState.TERMINATING)
        sim.core._emit_host("HostOffline")
        record.transition(HostState.GONE)
        self._emit_terminated(host_id)

    def crash(self, host_id: CloudHostId) -> None:
        """Fault injection: the host vanishes with no events."""
        record = self.record(host_id)
        record.state = HostState.GONE

    def host_core(self, host_id: CloudHostId) -> HostCore:
        return self._hosts[host_id].core
