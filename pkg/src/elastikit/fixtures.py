"""Small registered classes used by the test suite and the README examples.

They live in the package (not in tests/) because spawned host processes
must be able to import the same registry the manager holds.
"""

from __future__ import annotations

import time

from .core import BY_REFERENCE, BY_VALUE, Int64, List, Map, Null, Ref, Text, Value
from .hostd import ClassRegistry, CloudClass, MethodSpec


class Counter:
    """Integer accumulator with a snapshot, the canonical stateful object."""

    def __init__(self, ctx):
        self.value = Int64(0)

    def add(self, amount: Int64) -> Int64:
        self.value = Int64(self.value.value + amount.value)
        return self.value

    def get(self) -> Int64:
        return self.value

    def snapshot(self) -> Value:
        return self.value

    @staticmethod
    def restore(ctx, state: Value) -> "Counter":
        counter = Counter(ctx)
        counter.value = state
        return counter


class Recorder:
    """Tagged append-only log of values; snapshots carry tag and contents."""

    def __init__(self, ctx, tag: Text):
        self.tag = tag
        self._items: tuple = ()

    def append(self, item: Value) -> Int64:
        self._items = self._items + (item,)
        return Int64(len(self._items))

    def items(self) -> List:
        return List(self._items)

    def clear(self) -> None:
        self._items = ()

    def snapshot(self) -> Value:
        return Map({"tag": self.tag, "items": List(self._items)})

    @staticmethod
    def restore(ctx, state: Value) -> "Recorder":
        recorder = Recorder(ctx, state["tag"])
        recorder._items = state["items"].items
        return recorder


class Gadget:
    """Kitchen-sink fixture: echo, failures, sleeps, globals, custom events,
    and by-reference passing. Deliberately not snapshotable."""

    def __init__(self, ctx):
        self._ctx = ctx
        self.held = Null()

    def echo(self, value: Value) -> Value:
        return value

    def fail(self, message: Text) -> None:
        raise RuntimeError(message.value)

    def sleep_ms(self, duration: Int64) -> None:
        time.sleep(duration.value / 1000.0)

    def global_put(self, name: Text, value: Value) -> None:
        self._ctx.global_set(name.value, value)

    def global_read(self, name: Text) -> Value:
        return self._ctx.global_get(name.value)

    def chirp(self, note: Text) -> None:
        self._ctx.emit("custom.gadget.chirp", {"note": note})

    def hold(self, ref: Ref) -> None:
        self.held = ref

    def peek(self) -> Ref:
        return self.held

    def fetch(self, digest_hex: Text) -> Int64:
        payload = self._ctx.fetch_artifact(bytes.fromhex(digest_hex.value))
        return Int64(len(payload))


def build_registry() -> ClassRegistry:
    registry = ClassRegistry()
    registry.register(
        CloudClass(
            name="counter",
            factory=Counter,
            ctor_params=(),
            methods={
                "add": MethodSpec(Counter.add, params=(BY_VALUE,)),
                "get": MethodSpec(Counter.get),
            },
            fields={"value": BY_VALUE},
            snapshot=Counter.snapshot,
            restore=Counter.restore,
        )
    )
    registry.register(
        CloudClass(
            name="recorder",
            factory=Recorder,
            ctor_params=(BY_VALUE,),
            methods={
                "append": MethodSpec(Recorder.append, params=(BY_VALUE,)),
                "items": MethodSpec(Recorder.items),
                "clear": MethodSpec(Recorder.clear, returns=None),
            },
            fields={"tag": BY_VALUE},
            snapshot=Recorder.snapshot,
            restore=Recorder.restore,
        )
    )
    registry.register(
        CloudClass(
            name="gadget",
            factory=Gadget,
            ctor_params=(),
            methods={
                "echo": MethodSpec(Gadget.echo, params=(BY_VALUE,)),
                "fail": MethodSpec(Gadget.fail, params=(BY_VALUE,), returns=None),
                "sleep_ms": MethodSpec(Gadget.sleep_ms, params=(BY_VALUE,), returns=None),
                "global_put": MethodSpec(
                    Gadget.global_put, params=(BY_VALUE, BY_VALUE), returns=None
                ),
                "global_read": MethodSpec(Gadget.global_read, params=(BY_VALUE,)),
                "chirp": MethodSpec(Gadget.chirp, params=(BY_VALUE,), returns=None),
                "hold": MethodSpec(Gadget.hold, params=(BY_REFERENCE,), returns=None),
                "peek": MethodSpec(Gadget.peek, returns=BY_REFERENCE),
                "fetch": MethodSpec(Gadget.fetch, params=(BY_VALUE,)),
            },
            fields={"held": BY_REFERENCE},
        )
    )
    return registry


REGISTRY = build_registry()
