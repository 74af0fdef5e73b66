"""Monitor -> Analyze -> Plan -> Execute control loop over a pluggable backend."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from typing import IO, Any, AsyncIterator, Callable, Mapping, Protocol

from .errors import BackendUnavailable, NoLivePods
from .metrics import MetricsStore, PodAggregate
from .model import CATEGORIES, NodeCategory, ServiceProfile, StrategyKind, StrategyWeights, to_json
from .strategy import normalize_metrics, score_pod, scores_to_profile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Thresholds:
    high: float = 0.8
    low: float = 0.2
    queue_pressure: float = 0.9


@dataclass(frozen=True)
class ScalingPolicy:
    enabled: bool = True
    min_replicas: int = 5
    max_replicas: int = 7
    # False pins the static split to its initial replica count
    static_split_scales: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")


@dataclass(frozen=True)
class PlanOptions:
    epsilon: float = 1e-6
    mapping: str = "inverse"
    tau: float = 0.1
    normalize: bool = True


@dataclass(frozen=True)
class AnalysisFindings:
    overloaded_pods: frozenset[str] = frozenset()
    underutilized_pods: frozenset[str] = frozenset()
    category_imbalance: float = 0.0
    drop_pressure: bool = False


@dataclass(frozen=True)
class ScalingAction:
    category: NodeCategory
    target_replicas: int


@dataclass(frozen=True)
class Acknowledgment:
    profile_version: int | None
    applied: tuple[ScalingAction, ...] = ()


class Backend(Protocol):
    """What the loop needs from the simulator or the live harness."""

    def monitor(self, now_ms: float) -> dict[str, PodAggregate]: ...

    def swap_profile(self, profile: ServiceProfile) -> None: ...

    def replicas(self) -> dict[NodeCategory, int]: ...

    def scale(self, category: NodeCategory, target: int) -> None: ...


def monitor_tick(
    store: MetricsStore, now_ms: float, queue_fill: Mapping[str, float] | None = None
) -> dict[str, PodAggregate]:
    snap = store.snapshot()
    if queue_fill:
        snap = {
            pid: PodAggregate(a.pod_id, a.category, a.rt_ms, a.cpu, a.energy_mj, queue_fill.get(pid, 0.0))
            for pid, a in snap.items()
        }
    return snap


def analyze(snapshot: Mapping[str, PodAggregate], thresholds: Thresholds = Thresholds()) -> AnalysisFindings:
    over = frozenset(p for p, a in snapshot.items() if a.cpu >= thresholds.high)
    under = frozenset(p for p, a in snapshot.items() if a.cpu <= thresholds.low and p not in over)
    means = {}
    for c in CATEGORIES:
        cpus = [a.cpu for a in snapshot.values() if a.category == c]
        if cpus:
            means[c] = sum(cpus) / len(cpus)
    imbalance = abs(means[NodeCategory.SMALL] - means[NodeCategory.MEDIUM]) if len(means) == 2 else 0.0
    pressure = any(a.queue_fill >= thresholds.queue_pressure for a in snapshot.values())
    return AnalysisFindings(over, under, imbalance, pressure)


def pod_profile(
    snapshot: Mapping[str, PodAggregate],
    weights: StrategyWeights,
    version: int,
    now_ms: float,
    options: PlanOptions = PlanOptions(),
) -> ServiceProfile:
    raw = {p: (a.rt_ms, a.cpu, a.energy_mj) for p, a in snapshot.items()}
    values = normalize_metrics(raw) if options.normalize else raw
    scores = {p: score_pod(*v, weights) for p, v in values.items()}
    return scores_to_profile(scores, options.epsilon, version, now_ms, options.mapping, options.tau)


def plan(
    findings: AnalysisFindings,
    snapshot: Mapping[str, PodAggregate],
    weights: StrategyWeights,
    strategy: StrategyKind,
    previous: ServiceProfile | None = None,
    now_ms: float = 0.0,
    policy: ScalingPolicy = ScalingPolicy(),
    options: PlanOptions = PlanOptions(),
) -> tuple[ServiceProfile | None, list[ScalingAction]]:
    if not snapshot:
        raise NoLivePods("nothing to plan over")

    profile = previous
    if strategy is StrategyKind.POD_LEVEL:
        version = previous.version + 1 if previous is not None else 1
        profile = pod_profile(snapshot, weights, version, now_ms, options)

    actions: list[ScalingAction] = []
    if policy.enabled and (strategy is not StrategyKind.STATIC_SPLIT or policy.static_split_scales):
        for c in CATEGORIES:
            members = [p for p, a in snapshot.items() if a.category == c]
            if not members:
                continue
            n = len(members)
            if any(p in findings.overloaded_pods for p in members) and n < policy.max_replicas:
                actions.append(ScalingAction(c, n + 1))
            elif all(p in findings.underutilized_pods for p in members) and n > policy.min_replicas:
                actions.append(ScalingAction(c, n - 1))
    return profile, actions


def execute(actions: list[ScalingAction], profile: ServiceProfile | None, backend: Backend) -> Acknowledgment:
    """Swap the profile first, then apply scaling."""
    if profile is not None:
        backend.swap_profile(profile)
    current = backend.replicas()
    applied = []
    for a in actions:
        if current.get(a.category) == a.target_replicas:
            continue
        backend.scale(a.category, a.target_replicas)
        applied.append(a)
    return Acknowledgment(profile.version if profile is not None else None, tuple(applied))


@dataclass
class LoopEvent:
    ts: float
    profile_version: int | None
    probabilities: dict[str, float]
    actions: list[ScalingAction]
    findings: AnalysisFindings | None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        f = self.findings
        return {
            "ts": self.ts,
            "profile_version": self.profile_version,
            "probabilities": self.probabilities,
            "actions": [to_json(a) for a in self.actions],
            "findings": None
            if f is None
            else {
                "overloaded_pods": sorted(f.overloaded_pods),
                "underutilized_pods": sorted(f.underutilized_pods),
                "category_imbalance": f.category_imbalance,
                "drop_pressure": f.drop_pressure,
            },
            **({"error": self.error} if self.error else {}),
        }


@dataclass
class MapeKLoop:
    """One managing-system instance. ``iterate`` runs a single M-A-P-E pass.

    A failing plan or execute is logged and the last good profile stays in
    force; ``BackendUnavailable`` propagates so the caller can stop.
    """

    backend: Backend
    strategy: StrategyKind
    weights: StrategyWeights = field(default_factory=StrategyWeights)
    thresholds: Thresholds = field(default_factory=Thresholds)
    policy: ScalingPolicy = field(default_factory=ScalingPolicy)
    options: PlanOptions = field(default_factory=PlanOptions)
    profile: ServiceProfile | None = None
    event_sink: IO[str] | None = None
    keep_events: bool = True
    events: list[LoopEvent] = field(default_factory=list)
    last_snapshot: dict[str, PodAggregate] = field(default_factory=dict)

    def iterate(self, now_ms: float) -> LoopEvent:
        snapshot = self.backend.monitor(now_ms)
        self.last_snapshot = snapshot
        findings = None
        try:
            findings = analyze(snapshot, self.thresholds)
            profile, actions = plan(
                findings, snapshot, self.weights, self.strategy, self.profile, now_ms, self.policy, self.options
            )
            ack = execute(actions, profile, self.backend)
            self.profile = profile
            event = LoopEvent(now_ms, ack.profile_version, dict(profile.entries) if profile else {}, list(ack.applied), findings)
        except BackendUnavailable:
            raise
        except Exception as exc:  # keep looping on the last good profile
            log.warning("MAPE-K iteration at %.0f ms failed: %s", now_ms, exc)
            p = self.profile
            event = LoopEvent(now_ms, p.version if p else None, dict(p.entries) if p else {}, [], findings, repr(exc))
        if self.keep_events:
            self.events.append(event)
        if self.event_sink is not None:
            self.event_sink.write(json.dumps(event.to_json(), sort_keys=True) + "\n")
        return event


async def run_loop(
    loop: MapeKLoop,
    period_ms: float = 1000.0,
    duration_ms: float | None = None,
    stop: asyncio.Event | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> AsyncIterator[LoopEvent]:
    """Wall-clock driver: iterate on a fixed schedule, skipping ticks that were missed."""
    start = clock()
    k = 0
    while True:
        now_ms = (clock() - start) * 1000.0
        if duration_ms is not None and now_ms >= duration_ms:
            return
        if stop is not None and stop.is_set():
            return
        try:
            yield loop.iterate(now_ms)
        except BackendUnavailable as exc:
            log.error("backend unavailable, stopping control loop: %s", exc)
            return
        k += 1
        next_ms = k * period_ms
        elapsed = (clock() - start) * 1000.0
        while next_ms <= elapsed:
            k += 1
            next_ms = k * period_ms
        if duration_ms is not None and next_ms >= duration_ms:
            return
        await asyncio.sleep((next_ms - elapsed) / 1000.0)
