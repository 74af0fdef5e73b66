"""Domain types shared by the simulator, the live harness and the control loop.

All types are plain dataclasses. ``to_json`` / ``from_json`` give the external
JSON form (snake_case field names, enums as their string values).
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .errors import EmptyProfile


class NodeCategory(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"


# fixed iteration order everywhere: Small first, then Medium
CATEGORIES: tuple[NodeCategory, ...] = (NodeCategory.SMALL, NodeCategory.MEDIUM)


class StrategyKind(str, enum.Enum):
    STATIC_SPLIT = "static_split"
    CATEGORY_ARGMIN = "category_argmin"
    POD_LEVEL = "pod_level"

    @property
    def label(self) -> str:
        return {
            StrategyKind.STATIC_SPLIT: "StaticSplit",
            StrategyKind.CATEGORY_ARGMIN: "CategoryArgmin",
            StrategyKind.POD_LEVEL: "PodLevel",
        }[self]

    @classmethod
    def parse(cls, text: str) -> "StrategyKind":
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "staticsplit": cls.STATIC_SPLIT,
            "static": cls.STATIC_SPLIT,
            "category": cls.STATIC_SPLIT,
            "category_level": cls.STATIC_SPLIT,
            "categoryargmin": cls.CATEGORY_ARGMIN,
            "argmin": cls.CATEGORY_ARGMIN,
            "podlevel": cls.POD_LEVEL,
            "pod": cls.POD_LEVEL,
        }
        for member in cls:
            if key == member.value:
                return member
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown strategy {text!r}")


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    category: NodeCategory
    cores: int
    base_service_time_ms: float
    service_time_cv: float
    power_idle_w: float
    power_busy_w: float
    queue_capacity: int

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError("cores must be a positive integer")
        if self.base_service_time_ms <= 0:
            raise ValueError("base_service_time_ms must be positive")
        if self.service_time_cv < 0:
            raise ValueError("service_time_cv must be non-negative")
        if self.power_idle_w <= 0:
            raise ValueError("power_idle_w must be positive")
        if self.power_busy_w < self.power_idle_w:
            raise ValueError("power_busy_w must be >= power_idle_w")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be a positive integer")

    @property
    def midpoint_power_w(self) -> float:
        return 0.5 * (self.power_idle_w + self.power_busy_w)

    @classmethod
    def default(cls, category: NodeCategory, node_id: str | None = None, **overrides: Any) -> "NodeSpec":
        params = dict(DEFAULT_NODE_PARAMS[NodeCategory(category)])
        params.update(overrides)
        return cls(node_id=node_id or NodeCategory(category).value, category=NodeCategory(category), **params)


# Calibration knobs for the two hardware classes. Service-time anchors are the
# measured per-task means for Raspberry Pi (small) and PN53 (medium) nodes;
# cores are the parallel inference slots, not hardware threads.
DEFAULT_NODE_PARAMS: dict[NodeCategory, dict[str, Any]] = {
    NodeCategory.SMALL: dict(
        cores=1,
        base_service_time_ms=150.0,
        service_time_cv=0.2,
        power_idle_w=2.5,
        power_busy_w=4.5,
        queue_capacity=20,
    ),
    NodeCategory.MEDIUM: dict(
        cores=3,
        base_service_time_ms=55.0,
        service_time_cv=0.2,
        power_idle_w=8.0,
        power_busy_w=20.0,
        queue_capacity=50,
    ),
}


@dataclass(frozen=True)
class PodRef:
    pod_id: str
    node_id: str
    category: NodeCategory
    address: str = ""


@dataclass(frozen=True)
class StrategyWeights:
    w1: float = 0.5
    w2: float = 0.3
    w3: float = 0.2

    def __post_init__(self) -> None:
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("weights must be non-negative")
        if self.w1 + self.w2 + self.w3 <= 0:
            raise ValueError("weights must not all be zero")

    def scaled(self, k: float) -> "StrategyWeights":
        return StrategyWeights(self.w1 * k, self.w2 * k, self.w3 * k)


@dataclass(frozen=True)
class Task:
    task_id: str
    tag_id: str
    arrival_time_ms: float
    replication_index: int = 0


@dataclass(frozen=True)
class TaskOutcome:
    task_id: str
    pod_id: Optional[str]
    dispatch_time_ms: float
    completion_time_ms: Optional[float]
    response_time_ms: Optional[float]
    energy_mj: float
    dropped: bool

    def __post_init__(self) -> None:
        if self.dropped:
            if self.completion_time_ms is not None or self.response_time_ms is not None or self.energy_mj:
                raise ValueError("a dropped outcome carries no completion, response time or energy")
        else:
            if self.pod_id is None or self.response_time_ms is None or self.response_time_ms < 0:
                raise ValueError("a completed outcome needs a pod and a non-negative response time")
            if self.energy_mj < 0:
                raise ValueError("energy_mj must be non-negative")

    @classmethod
    def drop(cls, task_id: str, dispatch_time_ms: float, pod_id: str | None = None) -> "TaskOutcome":
        return cls(task_id, pod_id, dispatch_time_ms, None, None, 0.0, True)


@dataclass(frozen=True)
class ServiceProfile:
    """Dispatch probability per pod. Replaced as a whole, never mutated."""

    entries: dict[str, float]
    version: int = 0
    updated_at_ms: float = 0.0

    def __post_init__(self) -> None:
        if any(p < 0 for p in self.entries.values()):
            raise ValueError("profile probabilities must be non-negative")
        if self.entries and abs(sum(self.entries.values()) - 1.0) > 1e-9:
            raise ValueError("profile probabilities must sum to 1")

    def probability(self, pod_id: str) -> float:
        return self.entries.get(pod_id, 0.0)

    def restricted_to(self, pod_ids: typing.Iterable[str], now_ms: float | None = None) -> "ServiceProfile":
        """Drop pods not in ``pod_ids`` and renormalise the rest."""
        keep = set(pod_ids)
        kept = {p: v for p, v in self.entries.items() if p in keep}
        total = sum(kept.values())
        if not kept or total <= 0:
            raise EmptyProfile("no live pod left in profile")
        entries = {p: v / total for p, v in sorted(kept.items())}
        return ServiceProfile(entries, self.version + 1, self.updated_at_ms if now_ms is None else now_ms)

    @classmethod
    def uniform(cls, pod_ids: typing.Iterable[str], version: int = 0, now_ms: float = 0.0) -> "ServiceProfile":
        ids = sorted(set(pod_ids))
        if not ids:
            raise EmptyProfile("cannot build a profile over zero pods")
        return cls({p: 1.0 / len(ids) for p in ids}, version, now_ms)


@dataclass(frozen=True)
class WorkloadPhase:
    rf: int
    duration_s: float
    tag_count: int = 19
    tag_period_s: float = 1.0

    def __post_init__(self) -> None:
        if self.rf < 1 or self.tag_count < 1:
            raise ValueError("rf and tag_count must be positive integers")
        if self.duration_s <= 0 or self.tag_period_s <= 0:
            raise ValueError("duration_s and tag_period_s must be positive")

    @property
    def offered_rate(self) -> float:
        """Requests per second."""
        return self.tag_count * self.rf / self.tag_period_s

    @property
    def periods(self) -> int:
        return int(self.duration_s / self.tag_period_s + 1e-9)


@dataclass(frozen=True)
class ExperimentReport:
    strategy_name: str
    avg_rt_ms: float
    p99_rt_ms: float
    energy_per_task_mj: float
    drop_count: int
    total_tasks: int
    per_category_utilization: dict[NodeCategory, float]
    timeline: list[dict[str, Any]] = field(default_factory=list)
    completed_count: int = 0
    in_flight_count: int = 0
    aborted: bool = False
    phases: list[dict[str, Any]] = field(default_factory=list)
    pods: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.drop_count <= self.total_tasks:
            raise ValueError("drop_count must lie in [0, total_tasks]")
        if self.avg_rt_ms < 0 or self.p99_rt_ms < 0:
            raise ValueError("response-time aggregates must be non-negative")


# --------------------------------------------------------------------------- JSON


def to_json(obj: Any) -> Any:
    """Encode a dataclass (or nested containers of them) into JSON-ready values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_json(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {(k.value if isinstance(k, enum.Enum) else k): to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_json(v) for v in obj]
    return obj


def _decode(tp: Any, value: Any) -> Any:
    if value is None:
        return None
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _decode(args[0], value) if len(args) == 1 else value
    if isinstance(tp, type) and dataclasses.is_dataclass(tp):
        return from_json(tp, value)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(value)
    if origin is dict:
        kt, vt = typing.get_args(tp) or (Any, Any)
        return {_decode(kt, k): _decode(vt, v) for k, v in value.items()}
    if origin in (list, tuple):
        (et, *_) = typing.get_args(tp) or (Any,)
        return [_decode(et, v) for v in value]
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def from_json(cls: type, data: dict[str, Any]) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _decode(hints[f.name], data[f.name])
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown fields for {cls.__name__}: {sorted(unknown)}")
    return cls(**kwargs)
