"""Content-addressed store and verifying cache."""

from __future__ import annotations

import threading
import time

import pytest

from elastikit.artifacts import (
    ArtifactCache,
    ArtifactStore,
    render_digest,
    sha256_digest,
)
from elastikit.errors import (
    OriginUnreachable,
    SizeExceeded,
    UnknownDigest,
    VerificationFailed,
)

# FIPS 180-4 reference digests
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
ABC_SHA256 = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class CountingOrigin:
    def __init__(self, store: ArtifactStore):
        self.store = store
        self.calls = 0
        self.corrupt_next = False
        self.delay_s = 0.0

    def __call__(self, digest: bytes) -> bytes:
        self.calls += 1
        if self.delay_s:
            time.sleep(self.delay_s)
        payload = self.store.get(digest)
        if self.corrupt_next:
            self.corrupt_next = False
            flipped = bytearray(payload or b"\x00")
            flipped[0] ^= 0x01  # one-bit corruption
            return bytes(flipped)
        return payload


def test_reference_digests():
    assert sha256_digest(b"").hex() == EMPTY_SHA256
    assert sha256_digest(b"abc").hex() == ABC_SHA256


def test_publish_returns_reference_digest_and_is_idempotent():
    store = ArtifactStore()
    d1 = store.publish(b"abc")
    d2 = store.publish(b"abc")
    assert d1 == d2
    assert d1.hex() == ABC_SHA256
    assert len(store) == 1
    assert store.publish(b"").hex() == EMPTY_SHA256


def test_publish_size_limit():
    store = ArtifactStore()
    with pytest.raises(SizeExceeded):
        store.publish(b"x" * (64 * 1024 * 1024 + 1))


def test_fetch_unknown_digest():
    store = ArtifactStore()
    cache = ArtifactCache(CountingOrigin(store))
    with pytest.raises(UnknownDigest):
        cache.fetch(sha256_digest(b"missing"))


def test_fetch_at_most_once():
    store = ArtifactStore()
    origin = CountingOrigin(store)
    cache = ArtifactCache(origin)
    digest = store.publish(b"payload")
    assert cache.fetch(digest) == b"payload"
    assert origin.calls == 1
    assert cache.fetch(digest) == b"payload"
    assert origin.calls == 1  # cache hit: zero origin traffic


def test_corruption_yields_verification_failed_and_cache_unchanged():
    store = ArtifactStore()
    origin = CountingOrigin(store)
    cache = ArtifactCache(origin)
    digest = store.publish(b"precious")
    origin.corrupt_next = True
    with pytest.raises(VerificationFailed):
        cache.fetch(digest)
    assert digest not in cache
    assert cache.fetch(digest) == b"precious"  # clean retry works


def test_origin_failure_maps_to_origin_unreachable():
    def broken(digest):
        raise OSError("no route")

    cache = ArtifactCache(broken)
    with pytest.raises(OriginUnreachable):
        cache.fetch(sha256_digest(b"x"))


def test_lru_eviction_respects_budget_and_recency():
    store = ArtifactStore()
    origin = CountingOrigin(store)
    cache = ArtifactCache(origin, budget_bytes=30)
    digests = [store.publish(bytes([i]) * 10) for i in range(4)]
    for digest in digests[:3]:
        cache.fetch(digest)
    assert cache.cached_bytes == 30
    cache.fetch(digests[0])  # refresh 0 so 1 becomes the eviction victim
    cache.fetch(digests[3])
    assert digests[1] not in cache
    assert digests[0] in cache and digests[2] in cache and digests[3] in cache
    assert cache.cached_bytes <= 30
    # evicted entries are re-fetched (eviction breaks fetch-at-most-once)
    before = origin.calls
    cache.fetch(digests[1])
    assert origin.calls == before + 1


def test_single_payload_larger_than_budget_not_retained():
    store = ArtifactStore()
    cache = ArtifactCache(CountingOrigin(store), budget_bytes=5)
    digest = store.publish(b"0123456789")
    assert cache.fetch(digest) == b"0123456789"
    assert cache.cached_bytes == 0


def test_concurrent_misses_coalesce():
    store = ArtifactStore()
    origin = CountingOrigin(store)
    origin.delay_s = 0.05
    cache = ArtifactCache(origin)
    digest = store.publish(b"shared")
    results = []

    def fetch():
        results.append(cache.fetch(digest))

    threads = [threading.Thread(target=fetch) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [b"shared"] * 8
    assert origin.calls == 1


def test_render_digest_is_lowercase_hex():
    digest = sha256_digest(b"abc")
    assert render_digest(digest) == ABC_SHA256
