"""Scenario configuration: one JSON document per experiment."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigInvalid
from .mapek import PlanOptions, ScalingPolicy, Thresholds
from .model import DEFAULT_NODE_PARAMS, NodeCategory, NodeSpec, StrategyKind, StrategyWeights, WorkloadPhase

ENV_OUTPUT_DIR = "EDGE_OFFLOAD_OUTPUT_DIR"
ENV_LOG_LEVEL = "EDGE_OFFLOAD_LOG_LEVEL"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NodeConfig(_Strict):
    category: NodeCategory
    node_id: Optional[str] = None
    replicas: int = Field(5, ge=0)
    cores: Optional[int] = Field(None, ge=1)
    base_service_time_ms: Optional[float] = Field(None, gt=0)
    service_time_cv: Optional[float] = Field(None, ge=0)
    power_idle_w: Optional[float] = Field(None, gt=0)
    power_busy_w: Optional[float] = Field(None, gt=0)
    queue_capacity: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _consistent(self) -> "NodeConfig":
        self.spec()  # NodeSpec checks cross-field invariants such as busy >= idle power
        return self

    def spec(self) -> NodeSpec:
        params = dict(DEFAULT_NODE_PARAMS[self.category])
        for key in params:
            value = getattr(self, key)
            if value is not None:
                params[key] = value
        return NodeSpec(node_id=self.node_id or self.category.value, category=self.category, **params)


class PhaseConfig(_Strict):
    rf: int = Field(ge=1)
    duration_s: float = Field(gt=0)
    tag_count: int = Field(19, ge=1)
    tag_period_s: float = Field(1.0, gt=0)

    def phase(self) -> WorkloadPhase:
        return WorkloadPhase(self.rf, self.duration_s, self.tag_count, self.tag_period_s)


class WeightsConfig(_Strict):
    w1: float = Field(0.5, ge=0)
    w2: float = Field(0.3, ge=0)
    w3: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "WeightsConfig":
        if self.w1 + self.w2 + self.w3 <= 0:
            raise ValueError("weights must not all be zero")
        return self

    def weights(self) -> StrategyWeights:
        return StrategyWeights(self.w1, self.w2, self.w3)


class DispatcherConfig(_Strict):
    max_in_flight: int = Field(20, ge=1)
    timeout_ms: float = Field(5000.0, gt=0)
    poll_period_ms: float = Field(200.0, gt=0)


class ScalingConfig(_Strict):
    enabled: bool = True
    min_replicas: int = Field(5, ge=1)
    max_replicas: int = Field(7, ge=1)
    static_split_scales: bool = True

    @model_validator(mode="after")
    def _bounds(self) -> "ScalingConfig":
        if self.min_replicas > self.max_replicas:
            raise ValueError("min_replicas must not exceed max_replicas")
        return self

    def policy(self) -> ScalingPolicy:
        return ScalingPolicy(self.enabled, self.min_replicas, self.max_replicas, self.static_split_scales)


class ThresholdsConfig(_Strict):
    high: float = Field(0.8, ge=0, le=1)
    low: float = Field(0.2, ge=0, le=1)
    queue_pressure: float = Field(0.9, ge=0, le=1)

    def thresholds(self) -> Thresholds:
        return Thresholds(self.high, self.low, self.queue_pressure)


class PlanConfig(_Strict):
    epsilon: float = Field(1e-6, gt=0)
    mapping: Literal["inverse", "softmax"] = "inverse"
    tau: float = Field(0.1, gt=0)
    normalize: bool = True

    def options(self) -> PlanOptions:
        return PlanOptions(self.epsilon, self.mapping, self.tau, self.normalize)


class WorkerEndpoint(_Strict):
    address: str
    category: NodeCategory
    node_id: Optional[str] = None
    pod_id: Optional[str] = None


class ScenarioConfig(_Strict):
    backend: Literal["sim", "live"] = "sim"
    nodes: list[NodeConfig] = Field(
        default_factory=lambda: [NodeConfig(category=NodeCategory.SMALL), NodeConfig(category=NodeCategory.MEDIUM)]
    )
    phases: list[PhaseConfig] = Field(
        default_factory=lambda: [PhaseConfig(rf=2, duration_s=300), PhaseConfig(rf=5, duration_s=300), PhaseConfig(rf=1, duration_s=300)]
    )
    strategy: StrategyKind = StrategyKind.POD_LEVEL
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    seed: int = 0
    loop_period_ms: float = Field(1000.0, gt=0)
    metrics_horizon_ms: int = Field(5000, gt=0)
    sample_period_ms: float = Field(200.0, gt=0)
    dispatcher: DispatcherConfig = Field(default_factory=DispatcherConfig)
    scaling: ScalingConfig = Field(default_factory=ScalingConfig)
    thresholds: ThresholdsConfig = Field(default_factory=ThresholdsConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)
    workers: list[WorkerEndpoint] = Field(default_factory=list)
    output_dir: str = "runs/latest"

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        if not self.phases:
            raise ValueError("at least one workload phase is required")
        if not any(n.replicas > 0 for n in self.nodes) and self.backend == "sim":
            raise ValueError("at least one node group needs replicas > 0")
        if self.backend == "live" and not self.workers:
            raise ValueError("live backend needs worker addresses")
        return self

    def node_groups(self) -> list[tuple[NodeSpec, int]]:
        return [(n.spec(), n.replicas) for n in self.nodes]

    def workload(self) -> list[WorkloadPhase]:
        return [p.phase() for p in self.phases]

    def with_updates(self, **changes) -> "ScenarioConfig":
        return parse_config({**self.model_dump(mode="json"), **changes})


def _field_path(loc: tuple) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigInvalid(_field_path(tuple(err["loc"])), err["msg"]) from exc


def load_config(path: str | os.PathLike | None) -> ScenarioConfig:
    """Read a scenario file (``None`` gives the default scenario); env vars may override output_dir."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigInvalid("<file>", f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("<file>", f"invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigInvalid("<root>", "config must be a JSON object")
    if os.environ.get(ENV_OUTPUT_DIR):
        data = {**data, "output_dir": os.environ[ENV_OUTPUT_DIR]}
    return parse_config(data)


def default_scenario(phase_s: float = 300.0, **changes) -> ScenarioConfig:
    """Three-phase workload (RF 2, 5, 1), five pods per category."""
    phases = [{"rf": rf, "duration_s": phase_s} for rf in (2, 5, 1)]
    return parse_config({"phases": phases, **changes})
