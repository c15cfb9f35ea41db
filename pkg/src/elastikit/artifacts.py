"""Content-addressed distribution of resource payloads.

The manager holds the origin store; each host keeps a verifying LRU cache
so any payload crosses the wire at most once per cache lifetime.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from typing import Callable

from .errors import OriginUnreachable, SizeExceeded, UnknownDigest, VerificationFailed

MAX_ARTIFACT_BYTES = 64 * 1024 * 1024
DEFAULT_CACHE_BUDGET = 256 * 1024 * 1024

DIGEST_SIZE = 32


def sha256_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def render_digest(digest: bytes) -> str:
    return digest.hex()


class ArtifactStore:
    """Origin store keyed by SHA-256 digest; publish is idempotent."""

    def __init__(self):
        self._payloads: dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    def publish(self, payload: bytes) -> bytes:
        if len(payload) > MAX_ARTIFACT_BYTES:
            raise SizeExceeded(
                f"artifact is {len(payload)} bytes (max {MAX_ARTIFACT_BYTES})"
            )
        digest = sha256_digest(payload)
        with self._lock:
            self._payloads.setdefault(digest, bytes(payload))
        return digest

    def get(self, digest: bytes) -> bytes:
        with self._lock:
            payload = self._payloads.get(digest)
        if payload is None:
            raise UnknownDigest(render_digest(digest))
        return payload

    def __contains__(self, digest: bytes) -> bool:
        with self._lock:
            return digest in self._payloads

    def __len__(self) -> int:
        with self._lock:
            return len(self._payloads)


class ArtifactCache:
    """Per-host cache: verified payloads only, LRU eviction above the byte
    budget, and concurrent misses on one digest coalesce into one fetch."""

    def __init__(
        self,
        origin: Callable[[bytes], bytes],
        budget_bytes: int = DEFAULT_CACHE_BUDGET,
    ):
        self._origin = origin
        self._budget = budget_bytes
        self._entries: OrderedDict[bytes, bytes] = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()
        self._inflight: dict[bytes, threading.Event] = {}
        self.hits = 0
        self.misses = 0

    def fetch(self, digest: bytes) -> bytes:
        if len(digest) != DIGEST_SIZE:
            raise ValueError("digest must be 32 bytes")
        while True:
            with self._lock:
                payload = self._entries.get(digest)
                if payload is not None:
                    self._entries.move_to_end(digest)
                    self.hits += 1
                    return payload
                waiter = self._inflight.get(digest)
                if waiter is None:
                    self._inflight[digest] = threading.Event()
                    break
            # Another thread is fetching the same digest; wait and re-check.
            waiter.wait()
        try:
            payload = self._fetch_verified(digest)
            with self._lock:
                self.misses += 1
                self._store(digest, payload)
            return payload
        finally:
            with self._lock:
                self._inflight.pop(digest).set()

    def _fetch_verified(self, digest: bytes) -> bytes:
        try:
            payload = self._origin(digest)
        except (UnknownDigest, VerificationFailed):
            raise
        except Exception as e:
            raise OriginUnreachable(str(e)) from e
        if sha256_digest(payload) != digest:
            raise VerificationFailed(render_digest(digest))
        return payload

    def _store(self, digest: bytes, payload: bytes) -> None:
        if digest in self._entries:
            return
        self._entries[digest] = payload
        self._bytes += len(payload)
        while self._bytes > self._budget and len(self._entries) > 1:
            _, evicted = self._entries.popitem(last=False)
            self._bytes -= len(evicted)
        # A single payload larger than the budget is not retained.
        if self._bytes > self._budget:
            self._entries.popitem(last=False)
            self._bytes = 0

    def __contains__(self, digest: bytes) -> bool:
        with self._lock:
            return digest in self._entries

    @property
    def cached_bytes(self) -> int:
        with self._lock:
            return self._bytes

    def cached_digests(self) -> list[bytes]:
        with self._lock:
            return list(self._entries)
