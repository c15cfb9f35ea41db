"""Default scaling policies and the config-driven policy factory."""

from __future__ import annotations

import random

import pytest

from elastikit.core import CloudHostId, CloudObjectDescriptor, Float64, ObjectState
from elastikit.errors import PolicyError
from elastikit.events import (
    Aggregate,
    MetricEngine,
    MetricStatement,
    MetricType,
    MonitoringEvent,
    MonitoringMetric,
    MonitoringRepository,
    EventSource,
    VirtualClock,
    WindowKind,
    WindowSpec,
)
from elastikit.policy import (
    BillingDecision,
    HostView,
    ProvisionNew,
    RoundRobinFixed,
    ScalingDecision,
    SingleHost,
    ThresholdScaler,
    UseExisting,
    UTILIZATION_METRIC,
    parse_policy,
    register_policy,
)


def host(n: int, residents: int = 0) -> HostView:
    return HostView(CloudHostId(n), f"sim://{n}", residents, age_ms=0, ms_to_next_billing=1000)


def desc(n: int = 1) -> CloudObjectDescriptor:
    from elastikit.core import CloudObjectId

    return CloudObjectDescriptor(CloudObjectId(n), "counter", None, ObjectState.SCHEDULING)


def repo_with_utilization(value):
    """Build the utilization row the way the live system does: through the
    engine, from load-sample events."""
    clock = VirtualClock()
    repo = MonitoringRepository()
    engine = MetricEngine(repo, clock)
    engine.register(
        MonitoringMetric(
            UTILIZATION_METRIC,
            MetricType.FLOAT64,
            MetricStatement(
                Aggregate.AVG, "value", "custom.host.load", WindowSpec(WindowKind.SLIDING, 10_000)
            ),
        )
    )
    if value is not None:
        engine.offer(
            MonitoringEvent(
                "custom.host.load", 0, EventSource.manager(), {"value": Float64(value)}
            )
        )
    return repo


def empty_repo():
    return MonitoringRepository()


def test_single_host_provisions_once_then_reuses():
    policy = SingleHost()
    assert isinstance(policy.on_schedule(desc(), (), empty_repo()).placement, ProvisionNew)
    decision = policy.on_schedule(desc(), (host(2), host(1)), empty_repo())
    assert decision.placement == UseExisting(CloudHostId(1))
    assert policy.on_billing_boundary(CloudHostId(1), (host(1),), empty_repo()) is BillingDecision.KEEP


def test_round_robin_grows_to_size_then_spreads():
    policy = RoundRobinFixed(2)
    assert isinstance(policy.on_schedule(desc(), (), empty_repo()).placement, ProvisionNew)
    assert isinstance(policy.on_schedule(desc(), (host(1, 1),), empty_repo()).placement, ProvisionNew)
    decision = policy.on_schedule(desc(), (host(1, 1), host(2, 1)), empty_repo())
    assert decision.placement == UseExisting(CloudHostId(1))  # tie -> lowest id


def test_round_robin_spread_stays_within_one():
    rng = random.Random(5)
    policy = RoundRobinFixed(4)
    counts = {n: 0 for n in range(1, 5)}
    pool = tuple(host(n, 0) for n in range(1, 5))
    for _ in range(50):
        decision = policy.on_schedule(desc(), pool, empty_repo())
        assert isinstance(decision.placement, UseExisting)
        counts[decision.placement.host_id.value] += 1
        pool = tuple(host(n, counts[n]) for n in range(1, 5))
        assert max(counts.values()) - min(counts.values()) <= 1
        rng.random()


def test_threshold_scaler_reference_table():
    policy = ThresholdScaler(hi=0.8, lo=0.2, quota=4)
    pool2 = (host(1, 1), host(2, 2))
    # utilization above hi with room -> provision
    decision = policy.on_schedule(desc(), pool2, repo_with_utilization(0.9))
    assert isinstance(decision.placement, ProvisionNew)
    # mid utilization -> least loaded existing host
    decision = policy.on_schedule(desc(), pool2, repo_with_utilization(0.5))
    assert decision.placement == UseExisting(CloudHostId(1))
    # at quota: never provisions even under load
    pool4 = tuple(host(n, 1) for n in range(1, 5))
    decision = policy.on_schedule(desc(), pool4, repo_with_utilization(0.99))
    assert decision.placement == UseExisting(CloudHostId(1))
    # empty pool is a forced provision
    assert isinstance(policy.on_schedule(desc(), (), empty_repo()).placement, ProvisionNew)


def test_threshold_scaler_billing_rules():
    policy = ThresholdScaler(hi=0.8, lo=0.2, quota=4)
    idle = (host(1, 0), host(2, 1))
    assert (
        policy.on_billing_boundary(CloudHostId(1), idle, repo_with_utilization(0.05))
        is BillingDecision.DESTROY
    )
    # resident objects keep the host regardless of utilization
    assert (
        policy.on_billing_boundary(CloudHostId(2), idle, repo_with_utilization(0.05))
        is BillingDecision.KEEP
    )
    # busy pool keeps idle hosts too
    assert (
        policy.on_billing_boundary(CloudHostId(1), idle, repo_with_utilization(0.5))
        is BillingDecision.KEEP
    )
    # metric registered but never triggered counts as idle
    assert (
        policy.on_billing_boundary(CloudHostId(1), idle, repo_with_utilization(None))
        is BillingDecision.DESTROY
    )


def test_default_policies_are_deterministic():
    pool = (host(3, 1), host(1, 1), host(2, 0))
    for policy in (SingleHost(), RoundRobinFixed(3), ThresholdScaler(0.8, 0.2, 4)):
        repo = repo_with_utilization(0.5)
        first = policy.on_schedule(desc(), pool, repo)
        second = policy.on_schedule(desc(), pool, repo)
        assert first == second


def test_parse_policy_forms():
    assert isinstance(parse_policy("single", 8), SingleHost)
    rr = parse_policy("roundrobin:3", 8)
    assert isinstance(rr, RoundRobinFixed) and rr.size == 3
    ts = parse_policy("threshold:0.8,0.2", 5)
    assert isinstance(ts, ThresholdScaler)
    assert (ts.hi, ts.lo, ts.quota) == (0.8, 0.2, 5)
    with pytest.raises(PolicyError):
        parse_policy("nope", 8)
    with pytest.raises(PolicyError):
        parse_policy("roundrobin:zero", 8)
    with pytest.raises(PolicyError):
        parse_policy("threshold:0.2,0.8", 8)  # lo > hi


def test_custom_policy_registration():
    class Fixed(SingleHost):
        pass

    register_policy("fixed-for-test", lambda args, max_hosts: Fixed())
    assert isinstance(parse_policy("fixed-for-test", 8), Fixed)


def test_constructor_validation():
    with pytest.raises(ValueError):
        RoundRobinFixed(0)
    with pytest.raises(ValueError):
        ThresholdScaler(0.2, 0.8, 4)
    with pytest.raises(ValueError):
        ThresholdScaler(0.8, 0.2, 0)


def test_scaling_decision_helpers():
    d = ScalingDecision.use_existing(CloudHostId(1))
    assert d.placement == UseExisting(CloudHostId(1)) and d.migrations == ()
    d = ScalingDecision.provision_new(migrations=[(None, None)])
    assert isinstance(d.placement, ProvisionNew) and len(d.migrations) == 1
