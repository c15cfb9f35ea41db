"""Scaling-policy contract and the default policies.

Policies are the planning stage of the control loop: the manager consults
them when a new object needs a home and at every billing boundary. They
must be pure with respect to their inputs and deterministic; all defaults
tie-break by lowest host id.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .core import CloudHostId, CloudObjectDescriptor, Float64, Int64
from .errors import PolicyError, UnknownMetric
from .events import MonitoringRepository

UTILIZATION_METRIC = "host.utilization"


@dataclass(frozen=True)
class HostView:
    """One row of the pool snapshot handed to policies."""

    host_id: CloudHostId
    endpoint: str
    resident_objects: int
    age_ms: int
    ms_to_next_billing: int


HostPoolView = tuple  # tuple[HostView, ...]


class Placement:
    __slots__ = ()


@dataclass(frozen=True)
class UseExisting(Placement):
    host_id: CloudHostId


@dataclass(frozen=True)
class ProvisionNew(Placement):
    pass


@dataclass(frozen=True)
class ScalingDecision:
    """Where to put the new object, optionally preceded by migrations."""

    placement: Placement
    migrations: tuple = ()  # tuple[(CloudObjectId, CloudHostId), ...]

    @classmethod
    def use_existing(cls, host_id: CloudHostId, migrations=()) -> "ScalingDecision":
        return cls(UseExisting(host_id), tuple(migrations))

    @classmethod
    def provision_new(cls, migrations=()) -> "ScalingDecision":
        return cls(ProvisionNew(), tuple(migrations))


class BillingDecision(Enum):
    KEEP = "keep"
    DESTROY = "destroy"


class ScalingPolicy:
    """Base contract. on_schedule must return within the manager's policy
    deadline; on_billing_boundary timeouts are treated as KEEP."""

    def on_schedule(
        self,
        descriptor: CloudObjectDescriptor,
        pool: Sequence[HostView],
        repo: MonitoringRepository,
    ) -> ScalingDecision:
        raise NotImplementedError

    def on_billing_boundary(
        self,
        host_id: CloudHostId,
        pool: Sequence[HostView],
        repo: MonitoringRepository,
    ) -> BillingDecision:
        return BillingDecision.KEEP


def _least_loaded(pool: Sequence[HostView]) -> HostView:
    return min(pool, key=lambda h: (h.resident_objects, h.host_id))


class SingleHost(ScalingPolicy):
    """Everything on one host; never gives it up."""

    def on_schedule(self, descriptor, pool, repo) -> ScalingDecision:
        if not pool:
            return ScalingDecision.provision_new()
        return ScalingDecision.use_existing(min(h.host_id for h in pool))

    def on_billing_boundary(self, host_id, pool, repo) -> BillingDecision:
        return BillingDecision.KEEP


class RoundRobinFixed(ScalingPolicy):
    """Grow the pool to a fixed size, then spread objects evenly.

    Stateless round-robin: place on the least-loaded host (lowest id on
    ties), which keeps the resident-count spread at most 1.
    """

    def __init__(self, size: int):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.size = size

    def on_schedule(self, descriptor, pool, repo) -> ScalingDecision:
        if len(pool) < self.size:
            return ScalingDecision.provision_new()
        return ScalingDecision.use_existing(_least_loaded(pool).host_id)

    def on_billing_boundary(self, host_id, pool, repo) -> BillingDecision:
        return BillingDecision.KEEP


class ThresholdScaler(ScalingPolicy):
    """Reactive scaler keyed to the `host.utilization` repository metric.

    Scale out when utilization is above `hi` (never beyond `quota` hosts);
    at billing boundaries, release hosts that hold no objects while
    utilization is below `lo`.
    """

    def __init__(self, hi: float, lo: float, quota: int):
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("need 0 <= lo <= hi <= 1")
        if quota < 1:
            raise ValueError("quota must be >= 1")
        self.hi = hi
        self.lo = lo
        self.quota = quota

    @staticmethod
    def _utilization(repo: MonitoringRepository) -> Optional[float]:
        try:
            reading = repo.query(UTILIZATION_METRIC)
        except UnknownMetric:
            return None
        if reading is None:
            return None
        if isinstance(reading.value, (Float64, Int64)):
            return float(reading.value.value)
        return None

    def on_schedule(self, descriptor, pool, repo) -> ScalingDecision:
        if not pool:
            return ScalingDecision.provision_new()
        utilization = self._utilization(repo)
        if (
            utilization is not None
            and utilization > self.hi
            and len(pool) < self.quota
        ):
            return ScalingDecision.provision_new()
        return ScalingDecision.use_existing(_least_loaded(pool).host_id)

    def on_billing_boundary(self, host_id, pool, repo) -> BillingDecision:
        mine = [h for h in pool if h.host_id == host_id]
        if not mine or mine[0].resident_objects > 0:
            return BillingDecision.KEEP
        utilization = self._utilization(repo) or 0.0
        if utilization < self.lo:
            return BillingDecision.DESTROY
        return BillingDecision.KEEP


_POLICY_FACTORIES: dict[str, callable] = {}


def register_policy(name: str, factory) -> None:
    """Expose a custom policy under a config-selectable name.

    The factory receives (args: str, max_hosts: int) where args is the text
    after `name:` in the config value, empty if absent.
    """
    _POLICY_FACTORIES[name] = factory


def parse_policy(spec: str, max_hosts: int) -> ScalingPolicy:
    """Build a policy from a config value: `single`, `roundrobin:<n>`, or
    `threshold:<hi>,<lo>` (quota = max_hosts)."""
    name, _, args = spec.partition(":")
    name = name.strip().lower()
    args = args.strip()
    try:
        if name == "single":
            return SingleHost()
        if name == "roundrobin":
            return RoundRobinFixed(int(args))
        if name == "threshold":
            hi_text, _, lo_text = args.partition(",")
            return ThresholdScaler(float(hi_text), float(lo_text), max_hosts)
        if name in _POLICY_FACTORIES:
            return _POLICY_FACTORIES[name](args, max_hosts)
    except PolicyError:
        raise
    except Exception as e:
        raise PolicyError(f"bad policy spec {spec!r}: {e}") from e
    raise PolicyError(f"unknown policy {name!r}")
