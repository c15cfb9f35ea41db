from __future__ import annotations

import pytest

from elastikit.fixtures import REGISTRY, build_registry
from elastikit.manager import CloudManager, ManagerConfig

FIXTURES_SPEC = "elastikit.fixtures:REGISTRY"


def make_sim_manager(policy="roundrobin:2", **overrides) -> CloudManager:
    config = ManagerConfig(
        backend="simulated",
        policy=policy,
        startup_delay_ms=overrides.pop("startup_delay_ms", 0),
        **overrides,
    )
    return CloudManager(REGISTRY, config).start()


def make_local_manager(policy="roundrobin:1", **overrides) -> CloudManager:
    config = ManagerConfig(
        backend="local",
        policy=policy,
        registry_spec=FIXTURES_SPEC,
        billing_time_unit_ms=overrides.pop("billing_time_unit_ms", 3_600_000),
        **overrides,
    )
    return CloudManager(REGISTRY, config).start()


@pytest.fixture
def sim_manager():
    manager = make_sim_manager()
    yield manager
    manager.shutdown()


@pytest.fixture
def local_manager():
    manager = make_local_manager(policy="roundrobin:2")
    yield manager
    manager.shutdown()
