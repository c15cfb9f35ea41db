"""Seeded random generators shared by property and acceptance tests."""

from __future__ import annotations

import random
import string

from elastikit.core import (
    Bool,
    Bytes,
    CloudHostId,
    CloudObjectDescriptor,
    CloudObjectId,
    Float64,
    Int64,
    List,
    Map,
    Null,
    ObjectState,
    Ref,
    Text,
)
from elastikit.events import EventSource, MonitoringEvent
from elastikit import wire

I64_MIN = -(1 << 63)
I64_MAX = (1 << 63) - 1


def random_value(rng: random.Random, depth: int = 0):
    kinds = ["null", "bool", "int", "float", "text", "bytes", "ref"]
    if depth < 3:
        kinds += ["list", "map"] * 2
    kind = rng.choice(kinds)
    if kind == "null":
        return Null()
    if kind == "bool":
        return Bool(rng.random() < 0.5)
    if kind == "int":
        return Int64(rng.randint(I64_MIN, I64_MAX))
    if kind == "float":
        return Float64(rng.choice([0.0, -0.0, 1.5, -2.25, 1e300, 5e-324, float("inf"), float("nan"), rng.uniform(-1e6, 1e6)]))
    if kind == "text":
        length = rng.randint(0, 12)
        return Text("".join(rng.choice(string.printable[:94] + "äöüλ中") for _ in range(length)))
    if kind == "bytes":
        return Bytes(rng.randbytes(rng.randint(0, 16)))
    if kind == "ref":
        return Ref(CloudObjectId(rng.randint(0, (1 << 128) - 1)))
    if kind == "list":
        return List(tuple(random_value(rng, depth + 1) for _ in range(rng.randint(0, 4))))
    entries = {}
    for _ in range(rng.randint(0, 4)):
        key = "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 6)))
        entries[key] = random_value(rng, depth + 1)
    return Map(entries)


def random_identifier(rng: random.Random) -> str:
    return "".join(rng.choice(string.ascii_lowercase + "_") for _ in range(rng.randint(1, 10)))


def random_descriptor(rng: random.Random) -> CloudObjectDescriptor:
    state = rng.choice(list(ObjectState))
    resident = None
    if state in (ObjectState.DEPLOYED, ObjectState.MIGRATING):
        resident = CloudHostId(rng.randint(0, (1 << 128) - 1))
    return CloudObjectDescriptor(
        CloudObjectId(rng.randint(0, (1 << 128) - 1)),
        random_identifier(rng),
        resident,
        state,
    )


def random_event(rng: random.Random) -> MonitoringEvent:
    event_type = rng.choice(
        ["ExecutionFinished", "ObjectDeployedEvent", "custom.sample", "HostOnline"]
    )
    source = rng.choice(
        [
            EventSource.manager(),
            EventSource.external(),
            EventSource.host(CloudHostId(rng.randint(1, 1 << 64))),
            EventSource.object(CloudObjectId(rng.randint(1, 1 << 64))),
        ]
    )
    props = {}
    for _ in range(rng.randint(0, 3)):
        props[random_identifier(rng)] = random_value(rng, depth=2)
    return MonitoringEvent(event_type, rng.randint(0, 1 << 40), source, props)


def random_args(rng: random.Random) -> List:
    return List(tuple(random_value(rng, depth=1) for _ in range(rng.randint(0, 3))))


def random_message(rng: random.Random) -> wire.Message:
    choice = rng.randrange(14)
    co_id = CloudObjectId(rng.randint(0, (1 << 128) - 1))
    if choice == 0:
        return wire.DeployCO(random_descriptor(rng), random_args(rng))
    if choice == 1:
        return wire.InvokeCO(co_id, random_identifier(rng), random_args(rng))
    if choice == 2:
        return wire.GetField(co_id, random_identifier(rng))
    if choice == 3:
        return wire.SetField(co_id, random_identifier(rng), random_value(rng))
    if choice == 4:
        return wire.DestroyCO(co_id)
    if choice == 5:
        return wire.SnapshotCO(co_id)
    if choice == 6:
        return wire.RestoreCO(random_descriptor(rng), rng.randbytes(rng.randint(0, 64)))
    if choice == 7:
        return wire.ArtifactFetch(rng.randbytes(32))
    if choice == 8:
        return wire.ArtifactData(rng.randbytes(32), rng.randbytes(rng.randint(0, 128)))
    if choice == 9:
        return wire.GlobalGet(random_identifier(rng))
    if choice == 10:
        return wire.GlobalSet(random_identifier(rng), random_value(rng))
    if choice == 11:
        return wire.EventPush(random_event(rng))
    if choice == 12:
        return wire.Ok(random_value(rng))
    return wire.Err(random_identifier(rng), random_identifier(rng))
