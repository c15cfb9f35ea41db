"""Elastic remote-object middleware.

Applications register classes, deploy instances onto an elastic pool of
worker hosts through typed handles, and steer scaling with policies fed by
windowed metrics over the monitoring event stream.
"""

from .core import (
    BY_REFERENCE,
    BY_VALUE,
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
    PassingMode,
    Ref,
    Text,
    Value,
    decode_value,
    encode_value,
)
from .errors import ElastikitError
from .events import (
    EventBus,
    MetricStatement,
    MetricType,
    MonitoringEvent,
    MonitoringMetric,
    MonitoringRepository,
    parse_statement,
)
from .hostd import ClassRegistry, CloudClass, HostServer, MethodSpec
from .manager import CloudManager, CloudObjectHandle, ManagerConfig
from .policy import (
    BillingDecision,
    RoundRobinFixed,
    ScalingDecision,
    ScalingPolicy,
    SingleHost,
    ThresholdScaler,
    register_policy,
)

__version__ = "0.1.0"

__all__ = [
    "BY_REFERENCE",
    "BY_VALUE",
    "BillingDecision",
    "Bool",
    "Bytes",
    "ClassRegistry",
    "CloudClass",
    "CloudHostId",
    "CloudManager",
    "CloudObjectDescriptor",
    "CloudObjectHandle",
    "CloudObjectId",
    "ElastikitError",
    "EventBus",
    "Float64",
    "HostServer",
    "Int64",
    "List",
    "ManagerConfig",
    "Map",
    "MethodSpec",
    "MetricStatement",
    "MetricType",
    "MonitoringEvent",
    "MonitoringMetric",
    "MonitoringRepository",
    "Null",
    "ObjectState",
    "PassingMode",
    "Ref",
    "RoundRobinFixed",
    "ScalingDecision",
    "ScalingPolicy",
    "SingleHost",
    "Text",
    "ThresholdScaler",
    "Value",
    "decode_value",
    "encode_value",
    "parse_statement",
    "register_policy",
    "__version__",
]
