"""Framed request/response and event protocol between the manager and
host daemons.

Frame layout (bit-exact): u32 BE payload length | u8 msg_type | u64 BE
request_id | payload. A fuzzed stream never allocates beyond the declared
length, which is capped at 16 MiB.
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    MAX_PAYLOAD_BYTES,
    CloudHostId,
    CloudObjectDescriptor,
    CloudObjectId,
    List,
    Null,
    ObjectState,
    Value,
    decode_value_at,
    encode_value,
)
from .errors import (
    CodecError,
    ConnectionClosed,
    MalformedFrame,
    SizeExceeded,
    UnknownMsgType,
)
from .events import EventSource, MonitoringEvent, SourceKind

PROTOCOL_VERSION = 1

HEADER_SIZE = 13  # 4 length + 1 msg_type + 8 request_id
DIGEST_SIZE = 32

MSG_DEPLOY_CO = 0x01
MSG_INVOKE_CO = 0x02
MSG_GET_FIELD = 0x03
MSG_SET_FIELD = 0x04
MSG_DESTROY_CO = 0x05
MSG_SNAPSHOT_CO = 0x06
MSG_RESTORE_CO = 0x07
MSG_ARTIFACT_FETCH = 0x08
MSG_ARTIFACT_DATA = 0x09
MSG_GLOBAL_GET = 0x0A
MSG_GLOBAL_SET = 0x0B
MSG_EVENT_PUSH = 0x0C
MSG_OK = 0x7E
MSG_ERR = 0x7F


class Message:
    """Base of the wire message union."""

    __slots__ = ()


@dataclass(frozen=True)
class DeployCO(Message):
    descriptor: CloudObjectDescriptor
    ctor_args: List


@dataclass(frozen=True)
class InvokeCO(Message):
    co_id: CloudObjectId
    method: str
    args: List


@dataclass(frozen=True)
class GetField(Message):
    co_id: CloudObjectId
    field: str


@dataclass(frozen=True)
class SetField(Message):
    co_id: CloudObjectId
    field: str
    value: Value


@dataclass(frozen=True)
class DestroyCO(Message):
    co_id: CloudObjectId


@dataclass(frozen=True)
class SnapshotCO(Message):
    co_id: CloudObjectId


@dataclass(frozen=True)
class RestoreCO(Message):
    descriptor: CloudObjectDescriptor
    state: bytes


@dataclass(frozen=True)
class ArtifactFetch(Message):
    digest: bytes


@dataclass(frozen=True)
class ArtifactData(Message):
    """Success response to ArtifactFetch; the digest lets the receiver verify."""

    digest: bytes
    payload: bytes


@dataclass(frozen=True)
class GlobalGet(Message):
    name: str


@dataclass(frozen=True)
class GlobalSet(Message):
    name: str
    value: Value


@dataclass(frozen=True)
class EventPush(Message):
    """One-way host-to-manager event delivery; no response is sent."""

    event: MonitoringEvent


@dataclass(frozen=True)
class Ok(Message):
    value: Value = field(default_factory=Null)


@dataclass(frozen=True)
class Err(Message):
    code: str
    detail: str = ""


# Responses terminate a request; everything else either expects a response
# (requests) or is one-way (EventPush).
RESPONSE_TYPES = (Ok, Err, ArtifactData)


# --- payload encoding helpers ----------------------------------------------

def _put_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += len(raw).to_bytes(4, "big")
    out += raw


def _put_bytes(out: bytearray, b: bytes) -> None:
    out += len(b).to_bytes(4, "big")
    out += b


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedFrame("truncated payload")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def str_(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedFrame("string is not valid UTF-8") from e

    def bytes_(self) -> bytes:
        return self.take(self.u32())

    def value(self) -> Value:
        try:
            v, self.pos = decode_value_at(self.data, self.pos)
            return v
        except CodecError as e:
            raise MalformedFrame(f"bad value payload: {e}") from e

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedFrame(
                f"{len(self.data) - self.pos} trailing bytes in payload"
            )


_STATE_CODES = {
    ObjectState.SCHEDULING: 0,
    ObjectState.DEPLOYED: 1,
    ObjectState.MIGRATING: 2,
    ObjectState.DESTROYED: 3,
}
_STATE_FROM_CODE = {v: k for k, v in _STATE_CODES.items()}


def _put_descriptor(out: bytearray, d: CloudObjectDescriptor) -> None:
    out += d.id.to_bytes()
    _put_str(out, d.class_name)
    out.append(_STATE_CODES[d.state])
    if d.resident_on is None:
        out.append(0)
    else:
        out.append(1)
        out += d.resident_on.to_bytes()


def _take_descriptor(cur: _Cursor) -> CloudObjectDescriptor:
    co_id = CloudObjectId.from_bytes(cur.take(16))
    class_name = cur.str_()
    state_code = cur.take(1)[0]
    if state_code not in _STATE_FROM_CODE:
        raise MalformedFrame(f"bad descriptor state {state_code:#x}")
    flag = cur.take(1)[0]
    if flag not in (0, 1):
        raise MalformedFrame(f"bad residency flag {flag:#x}")
    resident = CloudHostId.from_bytes(cur.take(16)) if flag else None
    try:
        return CloudObjectDescriptor(
            co_id, class_name, resident, _STATE_FROM_CODE[state_code]
        )
    except ValueError as e:
        raise MalformedFrame(str(e)) from e


_SOURCE_CODES = {
    SourceKind.MANAGER: 0,
    SourceKind.HOST: 1,
    SourceKind.OBJECT: 2,
    SourceKind.EXTERNAL: 3,
}
_SOURCE_FROM_CODE = {v: k for k, v in _SOURCE_CODES.items()}


def _put_event(out: bytearray, e: MonitoringEvent) -> None:
    _put_str(out, e.event_type)
    out += e.timestamp.to_bytes(8, "big", signed=True)
    out.append(_SOURCE_CODES[e.source.kind])
    if e.source.id is not None:
        out += e.source.id.to_bytes(16, "big")
    props = bytearray()
    props += len(e.properties).to_bytes(4, "big")
    for key in sorted(e.properties, key=lambda k: k.encode("utf-8")):
        _put_str(props, key)
        props += encode_value(e.properties[key])
    out += props


def _take_event(cur: _Cursor) -> MonitoringEvent:
    event_type = cur.str_()
    ts = int.from_bytes(cur.take(8), "big", signed=True)
    code = cur.take(1)[0]
    if code not in _SOURCE_FROM_CODE:
        raise MalformedFrame(f"bad event source code {code:#x}")
    kind = _SOURCE_FROM_CODE[code]
    src_id = None
    if kind in (SourceKind.HOST, SourceKind.OBJECT):
        src_id = int.from_bytes(cur.take(16), "big")
    count = cur.u32()
    props: dict[str, Value] = {}
    for _ in range(count):
        key = cur.str_()
        props[key] = cur.value()
    try:
        return MonitoringEvent(event_type, ts, EventSource(kind, src_id), props)
    except ValueError as e:
        raise MalformedFrame(str(e)) from e


# --- frame encode / decode ---------------------------------------------------

def _encode_payload(m: Message) -> tuple[int, bytes]:
    out = bytearray()
    if isinstance(m, DeployCO):
        _put_descriptor(out, m.descriptor)
        out += encode_value(m.ctor_args)
        return MSG_DEPLOY_CO, bytes(out)
    if isinstance(m, InvokeCO):
        out += m.co_id.to_bytes()
        _put_str(out, m.method)
        out += encode_value(m.args)
        return MSG_INVOKE_CO, bytes(out)
    if isinstance(m, GetField):
        out += m.co_id.to_bytes()
        _put_str(out, m.field)
        return MSG_GET_FIELD, bytes(out)
    if isinstance(m, SetField):
        out += m.co_id.to_bytes()
        _put_str(out, m.field)
        out += encode_value(m.value)
        return MSG_SET_FIELD, bytes(out)
    if isinstance(m, DestroyCO):
        return MSG_DESTROY_CO, m.co_id.to_bytes()
    if isinstance(m, SnapshotCO):
        return MSG_SNAPSHOT_CO, m.co_id.to_bytes()
    if isinstance(m, RestoreCO):
        _put_descriptor(out, m.descriptor)
        _put_bytes(out, m.state)
        return MSG_RESTORE_CO, bytes(out)
    if isinstance(m, ArtifactFetch):
        if len(m.digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        return MSG_ARTIFACT_FETCH, m.digest
    if isinstance(m, ArtifactData):
        if len(m.digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        out += m.digest
        _put_bytes(out, m.payload)
        return MSG_ARTIFACT_DATA, bytes(out)
    if isinstance(m, GlobalGet):
        _put_str(out, m.name)
        return MSG_GLOBAL_GET, bytes(out)
    if isinstance(m, GlobalSet):
        _put_str(out, m.name)
        out += encode_value(m.value)
        return MSG_GLOBAL_SET, bytes(out)
    if isinstance(m, EventPush):
        _put_event(out, m.event)
        return MSG_EVENT_PUSH, bytes(out)
    if isinstance(m, Ok):
        return MSG_OK, encode_value(m.value)
    if isinstance(m, Err):
        _put_str(out, m.code)
        _put_str(out, m.detail)
        return MSG_ERR, bytes(out)
    raise TypeError(f"not a Message: {m!r}")


def encode_frame(m: Message, request_id: int) -> bytes:
    msg_type, payload = _encode_payload(m)
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise SizeExceeded(
            f"frame payload is {len(payload)} bytes (max {MAX_PAYLOAD_BYTES})"
        )
    header = (
        len(payload).to_bytes(4, "big")
        + bytes([msg_type])
        + request_id.to_bytes(8, "big")
    )
    return header + payload


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    cur = _Cursor(payload)
    if msg_type == MSG_DEPLOY_CO:
        descriptor = _take_descriptor(cur)
        args = cur.value()
        cur.done()
        if not isinstance(args, List):
            raise MalformedFrame("ctor_args must be a List value")
        return DeployCO(descriptor, args)
    if msg_type == MSG_INVOKE_CO:
        co_id = CloudObjectId.from_bytes(cur.take(16))
        method = cur.str_()
        args = cur.value()
        cur.done()
        if not isinstance(args, List):
            raise MalformedFrame("args must be a List value")
        return InvokeCO(co_id, method, args)
    if msg_type == MSG_GET_FIELD:
        co_id = CloudObjectId.from_bytes(cur.take(16))
        name = cur.str_()
        cur.done()
        return GetField(co_id, name)
    if msg_type == MSG_SET_FIELD:
        co_id = CloudObjectId.from_bytes(cur.take(16))
        name = cur.str_()
        value = cur.value()
        cur.done()
        return SetField(co_id, name, value)
    if msg_type == MSG_DESTROY_CO:
        co_id = CloudObjectId.from_bytes(cur.take(16))
        cur.done()
        return DestroyCO(co_id)
    if msg_type == MSG_SNAPSHOT_CO:
        co_id = CloudObjectId.from_bytes(cur.take(16))
        cur.done()
        return SnapshotCO(co_id)
    if msg_type == MSG_RESTORE_CO:
        descriptor = _take_descriptor(cur)
        state = cur.bytes_()
        cur.done()
        return RestoreCO(descriptor, state)
    if msg_type == MSG_ARTIFACT_FETCH:
        digest = cur.take(DIGEST_SIZE)
        cur.done()
        return ArtifactFetch(digest)
    if msg_type == MSG_ARTIFACT_DATA:
        digest = cur.take(DIGEST_SIZE)
        payload_bytes = cur.bytes_()
        cur.done()
        return ArtifactData(digest, payload_bytes)
    if msg_type == MSG_GLOBAL_GET:
        name = cur.str_()
        cur.done()
        return GlobalGet(name)
    if msg_type == MSG_GLOBAL_SET:
        name = cur.str_()
        value = cur.value()
        cur.done()
        return GlobalSet(name, value)
    if msg_type == MSG_EVENT_PUSH:
        event = _take_event(cur)
        cur.done()
        return EventPush(event)
    if msg_type == MSG_OK:
        value = cur.value()
        cur.done()
        return Ok(value)
    if msg_type == MSG_ERR:
        code = cur.str_()
        detail = cur.str_()
        cur.done()
        return Err(code, detail)
    raise UnknownMsgType(f"msg_type {msg_type:#04x}")


def decode_frame(stream) -> tuple[Message, int]:
    """Read one frame from a file-like object positioned at a frame boundary.

    Raises ConnectionClosed on EOF (including mid-frame), MalformedFrame on
    bad lengths or payload grammar, UnknownMsgType for out-of-catalog types.
    Consumes exactly HEADER_SIZE + length bytes on success.
    """
    header = _read_exact(stream, HEADER_SIZE)
    length = int.from_bytes(header[0:4], "big")
    msg_type = header[4]
    request_id = int.from_bytes(header[5:13], "big")
    if length > MAX_PAYLOAD_BYTES:
        raise MalformedFrame(f"declared payload {length} exceeds {MAX_PAYLOAD_BYTES}")
    payload = _read_exact(stream, length) if length else b""
    return _decode_payload(msg_type, payload), request_id


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ConnectionClosed(f"EOF after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# --- connections -------------------------------------------------------------

class Connection:
    """One framed, pipelined connection.

    One background thread reads frames: responses are matched to pending
    requests by request_id; everything else goes to the handler callback.
    Any number of threads may send concurrently.
    """

    def __init__(
        self,
        sock: socket.socket,
        handler: Optional[Callable[["Connection", Message, int], None]] = None,
        on_close: Optional[Callable[["Connection"], None]] = None,
        name: str = "",
        rfile=None,
    ):
        self._sock = sock
        # One buffered reader per socket: callers that already read the
        # handshake must hand their reader over instead of us making a new
        # one, or buffered bytes would be lost.
        self._rfile = rfile if rfile is not None else sock.makefile("rb")
        self._handler = handler
        self._on_close = on_close
        self.name = name
        self._send_lock = threading.Lock()
        self._pending: dict[int, _Waiter] = {}
        self._pending_lock = threading.Lock()
        self._next_id = 1
        self._closed = threading.Event()
        self._reader: Optional[threading.Thread] = None
        self.sent_by_type: dict[int, int] = {}

    def start(self) -> "Connection":
        self._reader = threading.Thread(
            target=self._read_loop, name=f"conn-reader-{self.name}", daemon=True
        )
        self._reader.start()
        return self

    def _alloc_id(self) -> int:
        with self._pending_lock:
            rid = self._next_id
            self._next_id += 1
            return rid

    def _send(self, m: Message, request_id: int) -> None:
        frame = encode_frame(m, request_id)
        msg_type = frame[4]
        with self._send_lock:
            if self._closed.is_set():
                raise ConnectionClosed("connection is closed")
            try:
                self._sock.sendall(frame)
            except OSError as e:
                raise ConnectionClosed(str(e)) from e
            self.sent_by_type[msg_type] = self.sent_by_type.get(msg_type, 0) + 1

    def request(self, m: Message, timeout: Optional[float] = None) -> Message:
        """Send a request and block until its response arrives."""
        rid = self._alloc_id()
        waiter = _Waiter()
        with self._pending_lock:
            self._pending[rid] = waiter
        try:
            self._send(m, rid)
            if not waiter.done.wait(timeout):
                raise ConnectionClosed("timed out waiting for response")
            if waiter.error is not None:
                raise waiter.error
            return waiter.response
        finally:
            with self._pending_lock:
                self._pending.pop(rid, None)

    def push(self, m: Message) -> None:
        """One-way send (EventPush); no response will arrive."""
        self._send(m, self._alloc_id())

    def respond(self, request_id: int, m: Message) -> None:
        self._send(m, request_id)

    def read_frame(self) -> tuple[Message, int]:
        """Read one frame synchronously; only valid before start()."""
        if self._reader is not None:
            raise RuntimeError("reader thread already owns the stream")
        return decode_frame(self._rfile)

    def _read_loop(self) -> None:
        try:
            while True:
                msg, rid = decode_frame(self._rfile)
                if isinstance(msg, RESPONSE_TYPES):
                    with self._pending_lock:
                        waiter = self._pending.get(rid)
                    if waiter is not None:
                        waiter.resolve(msg)
                    continue
                if self._handler is not None:
                    self._handler(self, msg, rid)
        except (ConnectionClosed, OSError):
            pass
        except Exception:
            pass  # a malformed peer must not kill the process
        finally:
            self._fail_pending()
            self._closed.set()
            if self._on_close is not None:
                self._on_close(self)

    def _fail_pending(self) -> None:
        with self._pending_lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for waiter in waiters:
            waiter.fail(ConnectionClosed("connection lost"))

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def close(self) -> None:
        self._closed.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        self._fail_pending()


class _Waiter:
    def __init__(self):
        self.done = threading.Event()
        self.response: Optional[Message] = None
        self.error: Optional[Exception] = None

    def resolve(self, msg: Message) -> None:
        self.response = msg
        self.done.set()

    def fail(self, error: Exception) -> None:
        self.error = error
        self.done.set()


# --- handshakes ---------------------------------------------------------------
#
# Before framing starts, the connecting side sends a fixed-size preamble:
#   data connections (manager -> hostd):   u16 version | 32-byte registry digest
#   callback connections (hostd -> manager): the same plus the 16-byte host id
# The accepting side answers with an Ok or Err frame (request_id 0) and, on
# Err, closes.

def send_handshake(
    sock: socket.socket, digest: bytes, host_id: Optional[CloudHostId] = None
) -> None:
    preamble = PROTOCOL_VERSION.to_bytes(2, "big") + digest
    if host_id is not None:
        preamble += host_id.to_bytes()
    sock.sendall(preamble)


def read_handshake(
    rfile, with_host_id: bool = False
) -> tuple[int, bytes, Optional[CloudHostId]]:
    size = 2 + DIGEST_SIZE + (16 if with_host_id else 0)
    raw = _read_exact(rfile, size)
    version = int.from_bytes(raw[0:2], "big")
    digest = raw[2 : 2 + DIGEST_SIZE]
    host_id = None
    if with_host_id:
        host_id = CloudHostId.from_bytes(raw[2 + DIGEST_SIZE :])
    return version, digest, host_id
