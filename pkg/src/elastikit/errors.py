"""Exception hierarchy shared across the package.

Errors that can cross the wire carry a stable code (the class name); the
mapping in both directions lives here so client and daemon stay in sync.
"""

from __future__ import annotations


class ElastikitError(Exception):
    """Base class for all errors raised by this package."""


# --- value codec ---------------------------------------------------------

class CodecError(ElastikitError):
    pass


class DepthExceeded(CodecError):
    pass


class SizeExceeded(CodecError):
    pass


class MalformedEncoding(CodecError):
    pass


# --- framing -------------------------------------------------------------

class WireError(ElastikitError):
    pass


class MalformedFrame(WireError):
    pass


class UnknownMsgType(WireError):
    pass


class ConnectionClosed(WireError):
    """Peer closed the connection (including EOF in the middle of a frame)."""


# --- host daemon ---------------------------------------------------------

class ProtocolMismatch(ElastikitError):
    pass


class RegistryMismatch(ElastikitError):
    """Handshake digests differ: the two sides hold different class registries."""


class DeployFailed(ElastikitError):
    pass


class UnknownClass(DeployFailed):
    pass


class DuplicateCO(DeployFailed):
    pass


class ConstructorFailed(DeployFailed):
    """Constructor raised; the message carries the application error text."""


class UnknownCO(ElastikitError):
    pass


class UnknownMethod(ElastikitError):
    pass


class ArityMismatch(ElastikitError):
    """Argument count or passing mode does not match the registered signature."""


class ApplicationError(ElastikitError):
    """A registered method raised; the message carries the application error text."""


class UnknownField(ElastikitError):
    pass


class NotQuiescent(ElastikitError):
    pass


class SnapshotUnsupported(ElastikitError):
    pass


# --- manager -------------------------------------------------------------

class PolicyError(ElastikitError):
    """Scaling policy failed: raised, timed out, or returned an invalid decision."""


class ObjectDestroyed(ElastikitError):
    pass


class HostUnreachable(ElastikitError):
    pass


class DestUnreachable(ElastikitError):
    pass


class ProvisionFailed(ElastikitError):
    pass


# --- backend -------------------------------------------------------------

class QuotaExceeded(ElastikitError):
    pass


class StartTimeout(ElastikitError):
    pass


class SpawnFailure(ElastikitError):
    pass


class UnknownHost(ElastikitError):
    pass


# --- artifacts -----------------------------------------------------------

class UnknownDigest(ElastikitError):
    pass


class VerificationFailed(ElastikitError):
    pass


class OriginUnreachable(ElastikitError):
    pass


# --- events / metrics ----------------------------------------------------

class DuplicateMetric(ElastikitError):
    pass


class InvalidStatement(ElastikitError):
    pass


class UnknownMetric(ElastikitError):
    pass


class MalformedLog(ElastikitError):
    pass


class RemoteError(ElastikitError):
    """An Err frame carried a code this client has no dedicated class for."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


# Errors a daemon may legitimately send back over the wire.
_WIRE_CODES = {
    cls.__name__: cls
    for cls in (
        ProtocolMismatch,
        RegistryMismatch,
        UnknownClass,
        DuplicateCO,
        ConstructorFailed,
        UnknownCO,
        UnknownMethod,
        ArityMismatch,
        ApplicationError,
        UnknownField,
        NotQuiescent,
        SnapshotUnsupported,
        UnknownDigest,
        SizeExceeded,
        MalformedEncoding,
    )
}


def wire_code(exc: Exception) -> str:
    """Stable code string for an exception travelling as an Err frame."""
    name = type(exc).__name__
    return name if name in _WIRE_CODES else "InternalError"


def from_wire_code(code: str, detail: str) -> ElastikitError:
    """Rebuild the client-side exception for an Err frame."""
    cls = _WIRE_CODES.get(code)
    if cls is None:
        return RemoteError(code, detail)
    return cls(detail)
