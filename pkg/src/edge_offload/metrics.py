"""Per-pod sliding windows of monitoring samples (the Monitor's knowledge base)."""

from __future__ import annotations

import csv
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyCategory, EmptyInput, OutOfOrderSample
from .model import NodeCategory, NodeSpec

DEFAULT_HORIZON_MS = 5000
METRICS_CSV_HEADER = ["timestamp_ms", "pod_id", "cpu_util", "power_w", "rt_count", "rt_mean_ms"]


@dataclass(frozen=True)
class MetricsSample:
    pod_id: str
    timestamp_ms: int
    cpu_util: float
    power_w: float
    completed_rts_ms: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.cpu_util <= 1.0:
            raise ValueError(f"cpu_util {self.cpu_util} outside [0, 1]")
        if self.power_w < 0:
            raise ValueError("power_w must be non-negative")


@dataclass
class MetricsWindow:
    """Samples of one pod whose timestamps lie within ``horizon_ms`` of the newest one.

    ``cold_rt_ms`` and ``cold_energy_mj`` are reported while the window holds no
    completions, so a freshly started pod can be scored before it has done any work.
    """

    pod_id: str
    category: NodeCategory = NodeCategory.SMALL
    horizon_ms: int = DEFAULT_HORIZON_MS
    cold_rt_ms: float = 100.0
    cold_cpu: float = 0.0
    cold_energy_mj: float = 500.0
    samples: deque = field(default_factory=deque)

    @classmethod
    def for_node(cls, pod_id: str, spec: NodeSpec, horizon_ms: int = DEFAULT_HORIZON_MS) -> "MetricsWindow":
        return cls(
            pod_id=pod_id,
            category=spec.category,
            horizon_ms=horizon_ms,
            cold_rt_ms=spec.base_service_time_ms,
            cold_energy_mj=spec.midpoint_power_w * spec.base_service_time_ms,
        )

    @property
    def latest_ms(self) -> int | None:
        return self.samples[-1].timestamp_ms if self.samples else None

    def __len__(self) -> int:
        return len(self.samples)


def record_sample(window: MetricsWindow, s: MetricsSample) -> MetricsWindow:
    if s.pod_id != window.pod_id:
        raise ValueError(f"sample for {s.pod_id!r} recorded into window of {window.pod_id!r}")
    latest = window.latest_ms
    if latest is not None and s.timestamp_ms <= latest:
        raise OutOfOrderSample(f"{s.pod_id}: timestamp {s.timestamp_ms} does not follow {latest}")
    window.samples.append(s)
    cutoff = s.timestamp_ms - window.horizon_ms
    while window.samples[0].timestamp_ms < cutoff:
        window.samples.popleft()
    return window


def mean_rt(window: MetricsWindow) -> float:
    total = 0.0
    n = 0
    for s in window.samples:
        total += sum(s.completed_rts_ms)
        n += len(s.completed_rts_ms)
    return total / n if n else window.cold_rt_ms


def mean_cpu(window: MetricsWindow) -> float:
    if not window.samples:
        return window.cold_cpu
    return sum(s.cpu_util for s in window.samples) / len(window.samples)


def window_energy_mj(window: MetricsWindow) -> tuple[float, int]:
    """(energy integrated over consecutive sample gaps in mJ, completions in those gaps).

    Each sample's power is taken to hold over the gap that ends at it, so the
    oldest sample contributes neither energy nor completions.
    """
    energy = 0.0
    completions = 0
    prev = None
    for s in window.samples:
        if prev is not None:
            energy += s.power_w * (s.timestamp_ms - prev)
            completions += len(s.completed_rts_ms)
        prev = s.timestamp_ms
    return energy, completions


def energy_per_task(window: MetricsWindow) -> float:
    energy, completions = window_energy_mj(window)
    return energy / completions if completions else window.cold_energy_mj


def category_aggregate(windows: Iterable[MetricsWindow], c: NodeCategory) -> tuple[float, float]:
    members = [w for w in windows if w.category == c]
    if not members:
        raise EmptyCategory(f"no pods in category {NodeCategory(c).value}")
    rt = sum(mean_rt(w) for w in members) / len(members)
    cpu = sum(mean_cpu(w) for w in members) / len(members)
    return rt, cpu


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile."""
    if not values:
        raise EmptyInput("percentile of an empty sequence")
    if not 0 < q < 100:
        raise ValueError("q must lie in (0, 100)")
    ordered = sorted(values)
    rank = math.ceil(q / 100.0 * len(ordered)) - 1
    return ordered[min(max(rank, 0), len(ordered) - 1)]


@dataclass(frozen=True)
class PodAggregate:
    pod_id: str
    category: NodeCategory
    rt_ms: float
    cpu: float
    energy_mj: float
    queue_fill: float = 0.0


class MetricsStore:
    """All pod windows plus an optional full history for CSV export.

    One writer per pod series; ``snapshot`` takes the lock so readers never see
    a half-recorded sample.
    """

    def __init__(self, horizon_ms: int = DEFAULT_HORIZON_MS, keep_history: bool = False):
        self.horizon_ms = horizon_ms
        self.keep_history = keep_history
        self.windows: dict[str, MetricsWindow] = {}
        self.history: list[MetricsSample] = []
        self._lock = threading.Lock()

    def register(self, pod_id: str, spec: NodeSpec) -> MetricsWindow:
        with self._lock:
            window = MetricsWindow.for_node(pod_id, spec, self.horizon_ms)
            self.windows[pod_id] = window
            return window

    def remove(self, pod_id: str) -> None:
        with self._lock:
            self.windows.pop(pod_id, None)

    def record(self, s: MetricsSample) -> None:
        with self._lock:
            record_sample(self.windows[s.pod_id], s)
            if self.keep_history:
                self.history.append(s)

    def __contains__(self, pod_id: str) -> bool:
        return pod_id in self.windows

    def snapshot(self) -> dict[str, PodAggregate]:
        with self._lock:
            return {
                pod_id: PodAggregate(pod_id, w.category, mean_rt(w), mean_cpu(w), energy_per_task(w))
                for pod_id, w in sorted(self.windows.items())
            }

    def category_metrics(self) -> dict[NodeCategory, tuple[float, float]]:
        with self._lock:
            out = {}
            for c in NodeCategory:
                try:
                    out[c] = category_aggregate(self.windows.values(), c)
                except EmptyCategory:
                    pass
            return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_CSV_HEADER)
            for s in self.history:
                n = len(s.completed_rts_ms)
                rt_mean = sum(s.completed_rts_ms) / n if n else 0.0
                writer.writerow([s.timestamp_ms, s.pod_id, repr(s.cpu_util), repr(s.power_w), n, repr(rt_mean)])
