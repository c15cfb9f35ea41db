"""Shared domain types: opaque identifiers, object descriptors, and the
tagged value model with its canonical byte encoding.

Everything here is immutable after construction and safe to share across
threads; the codec functions are pure.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

from .errors import DepthExceeded, MalformedEncoding, SizeExceeded

MAX_DEPTH = 64
MAX_PAYLOAD_BYTES = 16 * 1024 * 1024  # also the frame payload cap in wire.py

_ID_BYTES = 16
_ID_MAX = 1 << 128


@dataclass(frozen=True, order=True)
class CloudObjectId:
    """128-bit identifier of one remote object instance."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < _ID_MAX:
            raise ValueError("object id out of 128-bit range")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(_ID_BYTES, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CloudObjectId":
        if len(raw) != _ID_BYTES:
            raise ValueError("object id must be 16 bytes")
        return cls(int.from_bytes(raw, "big"))

    @property
    def hex(self) -> str:
        return self.to_bytes().hex()

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True, order=True)
class CloudHostId:
    """128-bit identifier of one provisioned worker host."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < _ID_MAX:
            raise ValueError("host id out of 128-bit range")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(_ID_BYTES, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CloudHostId":
        if len(raw) != _ID_BYTES:
            raise ValueError("host id must be 16 bytes")
        return cls(int.from_bytes(raw, "big"))

    @property
    def hex(self) -> str:
        return self.to_bytes().hex()

    def __str__(self) -> str:
        return self.hex


class IdSource:
    """Monotone id allocator; ids are never reused within one manager lifetime."""

    def __init__(self):
        self._next = 1
        self._lock = threading.Lock()

    def next_value(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value


class ObjectState(Enum):
    SCHEDULING = "scheduling"
    DEPLOYED = "deployed"
    MIGRATING = "migrating"
    DESTROYED = "destroyed"


@dataclass(frozen=True)
class CloudObjectDescriptor:
    """Identity, class, and residency of one remote object."""

    id: CloudObjectId
    class_name: str
    resident_on: Optional[CloudHostId]
    state: ObjectState

    def __post_init__(self):
        needs_host = self.state in (ObjectState.DEPLOYED, ObjectState.MIGRATING)
        if needs_host != (self.resident_on is not None):
            raise ValueError(
                f"resident_on must be set iff state is deployed/migrating, got {self.state}"
            )


class PassingMode(Enum):
    BY_VALUE = "by_value"
    BY_REFERENCE = "by_reference"


BY_VALUE = PassingMode.BY_VALUE
BY_REFERENCE = PassingMode.BY_REFERENCE


# --- value model ----------------------------------------------------------
#
# Tag bytes (wire-stable): 0x00 Null, 0x01 Bool, 0x02 Int64, 0x03 Float64,
# 0x04 Text, 0x05 Bytes, 0x06 List, 0x07 Map, 0x08 Ref. Multi-byte integers
# are big-endian; Text/Bytes carry a u32 length, List/Map a u32 count; map
# keys are encoded sorted by their UTF-8 bytes so encoding is canonical.

class Value:
    """Base of the tagged value union; concrete kinds are the subclasses below."""

    __slots__ = ()


@dataclass(frozen=True)
class Null(Value):
    pass


@dataclass(frozen=True)
class Bool(Value):
    value: bool

    def __post_init__(self):
        if not isinstance(self.value, bool):
            raise TypeError("Bool holds a bool")


_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


@dataclass(frozen=True)
class Int64(Value):
    value: int

    def __post_init__(self):
        if isinstance(self.value, bool) or not isinstance(self.value, int):
            raise TypeError("Int64 holds an int")
        if not _INT64_MIN <= self.value <= _INT64_MAX:
            raise ValueError("Int64 out of range")


@dataclass(frozen=True, eq=False)
class Float64(Value):
    """IEEE-754 double; equality and hashing are by bit pattern so that
    encode/decode round-trips compare equal even for NaN payloads."""

    value: float

    def __post_init__(self):
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise TypeError("Float64 holds a float")
        object.__setattr__(self, "value", float(self.value))

    def _bits(self) -> bytes:
        return struct.pack(">d", self.value)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Float64):
            return NotImplemented
        return self._bits() == other._bits()

    def __hash__(self) -> int:
        return hash(self._bits())


@dataclass(frozen=True)
class Text(Value):
    value: str

    def __post_init__(self):
        if not isinstance(self.value, str):
            raise TypeError("Text holds a str")


@dataclass(frozen=True)
class Bytes(Value):
    value: bytes

    def __post_init__(self):
        if isinstance(self.value, bytearray):
            object.__setattr__(self, "value", bytes(self.value))
        elif not isinstance(self.value, bytes):
            raise TypeError("Bytes holds bytes")


@dataclass(frozen=True)
class List(Value):
    items: tuple = ()

    def __post_init__(self):
        items = tuple(self.items)
        if any(not isinstance(v, Value) for v in items):
            raise TypeError("List items must be Values")
        object.__setattr__(self, "items", items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


@dataclass(frozen=True, eq=False)
class Map(Value):
    entries: Mapping[str, Value] = field(default_factory=dict)

    def __post_init__(self):
        entries = dict(self.entries)
        for k, v in entries.items():
            if not isinstance(k, str):
                raise TypeError("Map keys must be str")
            if not isinstance(v, Value):
                raise TypeError("Map values must be Values")
        object.__setattr__(self, "entries", entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Map):
            return NotImplemented
        return self.entries == other.entries

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.entries.items(), key=lambda kv: kv[0].encode())))

    def __getitem__(self, key: str) -> Value:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def get(self, key: str, default=None):
        return self.entries.get(key, default)


@dataclass(frozen=True)
class Ref(Value):
    """By-reference handle to a remote object; carries only the 16-byte id.
    Dereferencing is the manager's job, never the codec's."""

    id: CloudObjectId


_TAG_NULL = 0x00
_TAG_BOOL = 0x01
_TAG_INT64 = 0x02
_TAG_FLOAT64 = 0x03
_TAG_TEXT = 0x04
_TAG_BYTES = 0x05
_TAG_LIST = 0x06
_TAG_MAP = 0x07
_TAG_REF = 0x08


def encode_value(v: Value, max_bytes: int = MAX_PAYLOAD_BYTES) -> bytes:
    """Canonical encoding: the same value always yields the same bytes."""
    out = bytearray()
    _encode_into(out, v, 0)
    if len(out) > max_bytes:
        raise SizeExceeded(f"encoded value is {len(out)} bytes (max {max_bytes})")
    return bytes(out)


def _encode_into(out: bytearray, v: Value, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise DepthExceeded(f"value nesting exceeds {MAX_DEPTH}")
    if isinstance(v, Null):
        out.append(_TAG_NULL)
    elif isinstance(v, Bool):
        out.append(_TAG_BOOL)
        out.append(0x01 if v.value else 0x00)
    elif isinstance(v, Int64):
        out.append(_TAG_INT64)
        out += v.value.to_bytes(8, "big", signed=True)
    elif isinstance(v, Float64):
        out.append(_TAG_FLOAT64)
        out += v._bits()
    elif isinstance(v, Text):
        raw = v.value.encode("utf-8")
        out.append(_TAG_TEXT)
        out += len(raw).to_bytes(4, "big")
        out += raw
    elif isinstance(v, Bytes):
        out.append(_TAG_BYTES)
        out += len(v.value).to_bytes(4, "big")
        out += v.value
    elif isinstance(v, List):
        out.append(_TAG_LIST)
        out += len(v.items).to_bytes(4, "big")
        for item in v.items:
            _encode_into(out, item, depth + 1)
    elif isinstance(v, Map):
        out.append(_TAG_MAP)
        out += len(v.entries).to_bytes(4, "big")
        for key in sorted(v.entries, key=lambda k: k.encode("utf-8")):
            raw = key.encode("utf-8")
            out += len(raw).to_bytes(4, "big")
            out += raw
            _encode_into(out, v.entries[key], depth + 1)
    elif isinstance(v, Ref):
        out.append(_TAG_REF)
        out += v.id.to_bytes()
    else:
        raise TypeError(f"not a Value: {v!r}")


def decode_value(b: bytes) -> Value:
    """Inverse of encode_value on its image; rejects trailing bytes."""
    v, pos = _decode_at(b, 0, 0)
    if pos != len(b):
        raise MalformedEncoding(f"{len(b) - pos} trailing bytes after value")
    return v


def decode_value_at(b: bytes, pos: int) -> tuple[Value, int]:
    """Decode one value starting at pos; returns (value, next position).
    Values are self-delimiting, so embedding formats can call this inline."""
    return _decode_at(b, pos, 0)


def _need(b: bytes, pos: int, n: int) -> int:
    end = pos + n
    if end > len(b):
        raise MalformedEncoding("truncated value")
    return end


def _decode_at(b: bytes, pos: int, depth: int) -> tuple[Value, int]:
    if depth > MAX_DEPTH:
        raise MalformedEncoding(f"value nesting exceeds {MAX_DEPTH}")
    end = _need(b, pos, 1)
    tag = b[pos]
    pos = end
    if tag == _TAG_NULL:
        return Null(), pos
    if tag == _TAG_BOOL:
        end = _need(b, pos, 1)
        flag = b[pos]
        if flag not in (0, 1):
            raise MalformedEncoding(f"bad bool byte {flag:#x}")
        return Bool(flag == 1), end
    if tag == _TAG_INT64:
        end = _need(b, pos, 8)
        return Int64(int.from_bytes(b[pos:end], "big", signed=True)), end
    if tag == _TAG_FLOAT64:
        end = _need(b, pos, 8)
        return Float64(struct.unpack(">d", b[pos:end])[0]), end
    if tag == _TAG_TEXT:
        raw, pos = _decode_len_prefixed(b, pos)
        try:
            return Text(raw.decode("utf-8")), pos
        except UnicodeDecodeError as e:
            raise MalformedEncoding("text is not valid UTF-8") from e
    if tag == _TAG_BYTES:
        raw, pos = _decode_len_prefixed(b, pos)
        return Bytes(raw), pos
    if tag == _TAG_LIST:
        count, pos = _decode_count(b, pos)
        items = []
        for _ in range(count):
            item, pos = _decode_at(b, pos, depth + 1)
            items.append(item)
        return List(tuple(items)), pos
    if tag == _TAG_MAP:
        count, pos = _decode_count(b, pos)
        entries: dict[str, Value] = {}
        for _ in range(count):
            raw, pos = _decode_len_prefixed(b, pos)
            try:
                key = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise MalformedEncoding("map key is not valid UTF-8") from e
            if key in entries:
                raise MalformedEncoding(f"duplicate map key {key!r}")
            entries[key], pos = _decode_at(b, pos, depth + 1)
        return Map(entries), pos
    if tag == _TAG_REF:
        end = _need(b, pos, _ID_BYTES)
        return Ref(CloudObjectId.from_bytes(b[pos:end])), end
    raise MalformedEncoding(f"unknown value tag {tag:#04x}")


def _decode_len_prefixed(b: bytes, pos: int) -> tuple[bytes, int]:
    end = _need(b, pos, 4)
    length = int.from_bytes(b[pos:end], "big")
    pos = end
    end = _need(b, pos, length)
    return b[pos:end], end


def _decode_count(b: bytes, pos: int) -> tuple[int, int]:
    end = _need(b, pos, 4)
    count = int.from_bytes(b[pos:end], "big")
    # Each element consumes at least one byte, so a count larger than the
    # remaining buffer can never parse; reject before looping.
    if count > len(b) - end:
        raise MalformedEncoding("element count exceeds remaining bytes")
    return count, end


def value_to_py(v: Value):
    """Best-effort plain-Python view, mainly for logs and JSON export."""
    if isinstance(v, Null):
        return None
    if isinstance(v, (Bool, Int64, Float64, Text)):
        return v.value
    if isinstance(v, Bytes):
        return {"bytes": v.value.hex()}
    if isinstance(v, List):
        return [value_to_py(item) for item in v.items]
    if isinstance(v, Map):
        return {k: value_to_py(val) for k, val in sorted(v.entries.items())}
    if isinstance(v, Ref):
        return {"ref": v.id.hex}
    raise TypeError(f"not a Value: {v!r}")


def value_from_py(obj) -> Value:
    """Inverse of value_to_py to the extent JSON allows (ints stay Int64,
    floats Float64)."""
    if obj is None:
        return Null()
    if isinstance(obj, bool):
        return Bool(obj)
    if isinstance(obj, int):
        return Int64(obj)
    if isinstance(obj, float):
        return Float64(obj)
    if isinstance(obj, str):
        return Text(obj)
    if isinstance(obj, (list, tuple)):
        return List(tuple(value_from_py(item) for item in obj))
    if isinstance(obj, dict):
        if set(obj) == {"bytes"} and isinstance(obj["bytes"], str):
            return Bytes(bytes.fromhex(obj["bytes"]))
        if set(obj) == {"ref"} and isinstance(obj["ref"], str):
            return Ref(CloudObjectId.from_bytes(bytes.fromhex(obj["ref"])))
        return Map({k: value_from_py(v) for k, v in obj.items()})
    raise TypeError(f"cannot map {type(obj).__name__} into a Value")
