"""Deterministic discrete-event model of the heterogeneous edge cluster.

Each pod is a FIFO multi-server queue (one server per core) with a bounded
waiting room. Pod power follows utilisation linearly between its idle and
busy draw. A task is charged its core's share: ``power_idle/cores`` plus the
marginal ``(power_busy - power_idle)/cores``, for as long as it holds the
core. The idle draw of idle cores is left unattributed.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .config import ScenarioConfig
from .errors import EmptyEventQueue, NoLivePods
from .mapek import MapeKLoop, monitor_tick
from .metrics import MetricsSample, MetricsStore, PodAggregate
from .model import (
    CATEGORIES,
    ExperimentReport,
    NodeCategory,
    NodeSpec,
    PodRef,
    ServiceProfile,
    StrategyKind,
    Task,
    TaskOutcome,
    WorkloadPhase,
)
from .report import build_report
from .strategy import ClusterState, decide


class EventKind(enum.IntEnum):
    # value is the tie-break rank for events at the same instant
    ARRIVAL = 0
    SERVICE_START = 1
    SERVICE_END = 2
    METRIC_SAMPLE = 3
    PHASE_CHANGE = 4
    LOOP_TICK = 5


@dataclass(frozen=True)
class SimEvent:
    time_ms: float
    kind: EventKind
    payload: Any = None


class Enqueued(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


# ---------------------------------------------------------------- workload / models


def generate_workload(phases: Sequence[WorkloadPhase], seed: int | np.random.Generator = 0) -> Iterator[Task]:
    """Tag-driven arrivals: every tag emits ``rf`` tasks once per period.

    Each tag keeps a fixed offset inside the period, drawn once per stream.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_tags = max(p.tag_count for p in phases)
    offsets = rng.random(n_tags).tolist()
    counter = itertools.count()
    start_ms = 0.0
    for phase in phases:
        period_ms = phase.tag_period_s * 1000.0
        batch = []
        for k in range(phase.periods):
            base = start_ms + k * period_ms
            for tag in range(phase.tag_count):
                batch.append((base + offsets[tag] * period_ms, tag))
        batch.sort()
        for t, tag in batch:
            for r in range(phase.rf):
                yield Task(f"task-{next(counter):07d}", f"tag-{tag:02d}", t, r)
        start_ms += phase.duration_s * 1000.0


def draw_service_time(spec: NodeSpec, rng: np.random.Generator) -> float:
    """Lognormal with the node's mean and coefficient of variation (ms)."""
    mean = spec.base_service_time_ms
    cv = spec.service_time_cv
    if cv == 0:
        return mean
    sigma2 = math.log1p(cv * cv)
    return float(rng.lognormal(math.log(mean) - 0.5 * sigma2, math.sqrt(sigma2)))


def pod_power(spec: NodeSpec, util: float) -> float:
    return spec.power_idle_w + util * (spec.power_busy_w - spec.power_idle_w)


def pod_cpu_util(busy_core_ms: float, interval_ms: float, cores: int) -> float:
    """Busy core-time over available core-time in one sampling interval."""
    if interval_ms <= 0:
        return 0.0
    return min(1.0, max(0.0, busy_core_ms / (interval_ms * cores)))


def core_draw_w(spec: NodeSpec) -> float:
    """Per-core draw charged to a running task: idle share plus marginal busy power."""
    return (spec.power_busy_w - spec.power_idle_w) / spec.cores + spec.power_idle_w / spec.cores


def attribute_task_energy(spec: NodeSpec, duration_ms: float) -> float:
    """Energy (mJ) of one task holding a core for ``duration_ms``; W x ms = mJ."""
    return core_draw_w(spec) * duration_ms


# ---------------------------------------------------------------- pod state


@dataclass
class _Running:
    task: Task
    dispatch_ms: float
    start_ms: float
    energy_mj: float = 0.0


@dataclass
class PodSimState:
    ref: PodRef
    spec: NodeSpec
    created_ms: float = 0.0
    queue: deque = field(default_factory=deque)
    in_service: dict = field(default_factory=dict)
    pending_starts: int = 0
    live: bool = True
    last_ms: float = 0.0
    last_sample_ms: float = 0.0
    busy_ms_accum: float = 0.0  # busy core-ms since the last sample
    energy_mj: float = 0.0  # total pod energy, idle included
    busy_core_ms_total: float = 0.0
    core_ms_total: float = 0.0
    attributed_mj: float = 0.0
    completed_rts: list = field(default_factory=list)
    drops: int = 0

    @property
    def waiting(self) -> int:
        """Queued tasks not yet claimed by a core."""
        return len(self.queue) - self.pending_starts

    def advance(self, now: float) -> None:
        dt = now - self.last_ms
        if dt <= 0:
            return
        k = len(self.in_service)
        power = pod_power(self.spec, k / self.spec.cores)
        self.energy_mj += power * dt
        self.core_ms_total += self.spec.cores * dt
        if k:
            share = core_draw_w(self.spec) * dt
            for run in self.in_service.values():
                run.energy_mj += share
            self.busy_ms_accum += k * dt
            self.busy_core_ms_total += k * dt
            self.attributed_mj += k * share
        self.last_ms = now


def enqueue(pod: PodSimState, task: Task, now: float) -> Enqueued:
    """Admit ``task`` if the waiting room has space. Free cores are claimed by the caller."""
    pod.advance(now)
    if pod.waiting >= pod.spec.queue_capacity:
        pod.drops += 1
        return Enqueued.DROPPED
    pod.queue.append((task, now))
    return Enqueued.ACCEPTED


# ---------------------------------------------------------------- simulator


@dataclass
class SimResult:
    report: ExperimentReport
    outcomes: list[TaskOutcome]
    store: MetricsStore
    loop: MapeKLoop
    pods: dict[str, PodSimState]
    generated: int

    @property
    def pod_energy_mj(self) -> float:
        return sum(p.energy_mj for p in self.pods.values())

    @property
    def attributed_energy_mj(self) -> float:
        return sum(p.attributed_mj for p in self.pods.values())


class Simulator:
    """Event-driven backend; also the ``Backend`` the control loop talks to."""

    def __init__(
        self,
        config: ScenarioConfig,
        keep_history: bool = False,
        event_sink=None,
        arrivals: Iterable[Task] | None = None,
    ):
        """``arrivals`` replaces the tag workload with a scripted, time-ordered task stream."""
        self.config = config
        self.strategy = config.strategy
        self.phases = config.workload()
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self._workload_rng = np.random.default_rng(seeds[0])
        self._service_rng = np.random.default_rng(seeds[1])
        self._dispatch_rng = np.random.default_rng(seeds[2])

        self.now = 0.0
        self.end_ms = sum(p.duration_s for p in self.phases) * 1000.0
        self._events: list = []
        self._seq = itertools.count()
        self.outcomes: list[TaskOutcome] = []
        self.generated = 0
        self.phase_index = 0
        self.timeline: list[dict[str, Any]] = []

        self.store = MetricsStore(config.metrics_horizon_ms, keep_history=keep_history)
        self.pods: dict[str, PodSimState] = {}
        self._templates: dict[NodeCategory, NodeSpec] = {}
        self._next_index: dict[str, int] = {}
        self.cluster = ClusterState(
            pods={c: [] for c in CATEGORIES},
            weights=config.weights.weights(),
            normalize=config.plan.normalize,
        )
        for spec, replicas in config.node_groups():
            self._templates.setdefault(spec.category, spec)
            for _ in range(replicas):
                self._spawn(spec)

        self.loop = MapeKLoop(
            backend=self,
            strategy=self.strategy,
            weights=config.weights.weights(),
            thresholds=config.thresholds.thresholds(),
            policy=config.scaling.policy(),
            options=config.plan.options(),
            event_sink=event_sink,
        )

        self._arrivals = iter(arrivals) if arrivals is not None else generate_workload(self.phases, self._workload_rng)
        self._push_next_arrival()
        t = 0.0
        for i, p in enumerate(self.phases):
            self._push(t, EventKind.PHASE_CHANGE, i)
            t += p.duration_s * 1000.0
        self._push(config.sample_period_ms, EventKind.METRIC_SAMPLE)
        # the profile must exist before the first task arrives
        self._loop_tick(0.0)
        self._push(config.loop_period_ms, EventKind.LOOP_TICK)

    # ----------------------------------------------------------- events

    def _push(self, t: float, kind: EventKind, payload: Any = None) -> None:
        heapq.heappush(self._events, (t, int(kind), next(self._seq), payload))

    def _push_next_arrival(self) -> None:
        task = next(self._arrivals, None)
        if task is not None:
            self._push(task.arrival_time_ms, EventKind.ARRIVAL, task)

    def step(self) -> SimEvent:
        if not self._events:
            raise EmptyEventQueue("no pending events")
        t, kind, _, payload = heapq.heappop(self._events)
        kind = EventKind(kind)
        self.now = t
        if kind is EventKind.ARRIVAL:
            self.generated += 1
            self._arrive(payload)
            self._push_next_arrival()
        elif kind is EventKind.SERVICE_START:
            self._start(payload)
        elif kind is EventKind.SERVICE_END:
            self._finish(*payload)
        elif kind is EventKind.METRIC_SAMPLE:
            self._sample(t)
            nxt = t + self.config.sample_period_ms
            if nxt <= self.end_ms:
                self._push(nxt, EventKind.METRIC_SAMPLE)
        elif kind is EventKind.PHASE_CHANGE:
            self.phase_index = payload
        elif kind is EventKind.LOOP_TICK:
            self._loop_tick(t)
            nxt = t + self.config.loop_period_ms
            if nxt < self.end_ms:
                self._push(nxt, EventKind.LOOP_TICK)
        return SimEvent(t, kind, payload)

    def run(self, drain: bool = False) -> SimResult:
        """Process events up to the workload horizon.

        With ``drain`` the tasks still queued or in service at the horizon are
        run to completion (no further arrivals, samples or loop ticks).
        """
        while self._events and self._events[0][0] < self.end_ms:
            self.step()
        end = self.end_ms
        if drain:
            self._events = [e for e in self._events if e[1] in (EventKind.SERVICE_START, EventKind.SERVICE_END)]
            heapq.heapify(self._events)
            while self._events:
                self.step()
            end = max(end, self.now)
        self.now = end
        for pod in self.pods.values():
            pod.advance(end)
        return SimResult(self._report(), self.outcomes, self.store, self.loop, self.pods, self.generated)

    # ----------------------------------------------------------- task path

    def _arrive(self, task: Task) -> None:
        try:
            ref = decide(self.strategy, task, self.cluster, self._dispatch_rng)
        except NoLivePods:
            self.outcomes.append(TaskOutcome.drop(task.task_id, self.now))
            return
        pod = self.pods[ref.pod_id]
        if enqueue(pod, task, self.now) is Enqueued.DROPPED:
            self.outcomes.append(TaskOutcome.drop(task.task_id, self.now, None))
            return
        if len(pod.in_service) + pod.pending_starts < pod.spec.cores:
            pod.pending_starts += 1
            self._push(self.now, EventKind.SERVICE_START, ref.pod_id)

    def _start(self, pod_id: str) -> None:
        pod = self.pods[pod_id]
        pod.advance(self.now)
        pod.pending_starts -= 1
        task, dispatched = pod.queue.popleft()
        pod.in_service[task.task_id] = _Running(task, dispatched, self.now)
        service = draw_service_time(pod.spec, self._service_rng)
        self._push(self.now + service, EventKind.SERVICE_END, (pod_id, task.task_id))

    def _finish(self, pod_id: str, task_id: str) -> None:
        pod = self.pods[pod_id]
        pod.advance(self.now)
        run = pod.in_service.pop(task_id)
        rt = self.now - run.dispatch_ms
        self.outcomes.append(TaskOutcome(task_id, pod_id, run.dispatch_ms, self.now, rt, run.energy_mj, False))
        pod.completed_rts.append(rt)
        if pod.waiting > 0:
            pod.pending_starts += 1
            self._push(self.now, EventKind.SERVICE_START, pod_id)

    # ----------------------------------------------------------- monitoring

    def _sample(self, t: float) -> None:
        for pod in self.pods.values():
            pod.advance(t)
            if not pod.live:
                continue
            interval = t - pod.last_sample_ms
            if interval <= 0:
                continue
            util = pod_cpu_util(pod.busy_ms_accum, interval, pod.spec.cores)
            sample = MetricsSample(pod.ref.pod_id, int(round(t)), util, pod_power(pod.spec, util), tuple(pod.completed_rts))
            self.store.record(sample)
            pod.busy_ms_accum = 0.0
            pod.completed_rts = []
            pod.last_sample_ms = t

    def _loop_tick(self, t: float) -> None:
        self.loop.iterate(t)
        snap = self.loop.last_snapshot
        row: dict[str, Any] = {"timestamp_ms": t, "phase": self.phase_index}
        for c in CATEGORIES:
            cpus = [a.cpu for a in snap.values() if a.category == c]
            row[f"cpu.{c.value}"] = sum(cpus) / len(cpus) if cpus else 0.0
            row[f"replicas.{c.value}"] = len(self.cluster.pods[c])
            if self.cluster.profile is not None:
                row[f"share.{c.value}"] = sum(
                    self.cluster.profile.probability(p.pod_id) for p in self.cluster.pods[c]
                )
        self.timeline.append(row)

    # ----------------------------------------------------------- Backend protocol

    def monitor(self, now_ms: float) -> dict[str, PodAggregate]:
        fill = {pid: p.waiting / p.spec.queue_capacity for pid, p in self.pods.items() if p.live}
        return monitor_tick(self.store, now_ms, fill)

    def swap_profile(self, profile: ServiceProfile) -> None:
        self.cluster.profile = profile

    def replicas(self) -> dict[NodeCategory, int]:
        return {c: len(self.cluster.pods[c]) for c in CATEGORIES}

    def scale(self, category: NodeCategory, target: int) -> None:
        live = self.cluster.pods[category]
        while len(live) < target:
            self._spawn(self._templates[category])
        removed = False
        while len(live) > target:
            self._retire(live[-1].pod_id)
            removed = True
        profile = self.cluster.profile
        if removed and profile is not None:
            alive = {p.pod_id for p in self.cluster.live()}
            if any(self.cluster.profile.probability(pid) > 0 for pid in alive):
                self.cluster.profile = profile.restricted_to(alive, self.now)

    def _spawn(self, spec: NodeSpec) -> PodRef:
        idx = self._next_index.get(spec.node_id, 0)
        self._next_index[spec.node_id] = idx + 1
        ref = PodRef(f"{spec.node_id}-{idx:02d}", spec.node_id, spec.category, f"sim://{spec.node_id}-{idx:02d}")
        self.pods[ref.pod_id] = PodSimState(ref, spec, created_ms=self.now, last_ms=self.now, last_sample_ms=self.now)
        self.cluster.pods[spec.category].append(ref)
        self.store.register(ref.pod_id, spec)
        return ref

    def _retire(self, pod_id: str) -> None:
        pod = self.pods[pod_id]
        pod.live = False
        members = self.cluster.pods[pod.ref.category]
        members[:] = [p for p in members if p.pod_id != pod_id]
        self.store.remove(pod_id)

    # ----------------------------------------------------------- results

    def in_flight(self) -> int:
        return sum(len(p.queue) + len(p.in_service) for p in self.pods.values())

    def utilization(self) -> dict[NodeCategory, float]:
        out = {}
        for c in CATEGORIES:
            busy = sum(p.busy_core_ms_total for p in self.pods.values() if p.ref.category == c)
            avail = sum(p.core_ms_total for p in self.pods.values() if p.ref.category == c)
            out[c] = busy / avail if avail else 0.0
        return out

    def _report(self) -> ExperimentReport:
        phases = []
        t = 0.0
        for p in self.phases:
            phases.append({"rf": p.rf, "start_ms": t, "end_ms": t + p.duration_s * 1000.0, "offered_rate": p.offered_rate})
            t += p.duration_s * 1000.0
        return build_report(
            self.strategy.label,
            self.outcomes,
            self.generated,
            self.in_flight(),
            self.utilization(),
            timeline=self.timeline,
            phases=phases,
            pods={pid: p.ref.category.value for pid, p in sorted(self.pods.items())},
        )


def simulate(config: ScenarioConfig, **kwargs) -> SimResult:
    return Simulator(config, **kwargs).run()
