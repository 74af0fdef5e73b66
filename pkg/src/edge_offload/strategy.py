"""Offloading decisions: static split, category argmin and pod-level sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TypeVar

import numpy as np

from .errors import EmptyCategory, EmptyInput, EmptyProfile, EmptyService, NoLivePods
from .model import CATEGORIES, NodeCategory, PodRef, ServiceProfile, StrategyKind, StrategyWeights, Task

K = TypeVar("K")

DEFAULT_EPSILON = 1e-6


def normalize_metrics(
    raw: Mapping[K, tuple[float, float, float]],
) -> dict[K, tuple[float, float, float]]:
    """Divide each metric column by its maximum over the map (all-zero columns stay 0)."""
    if not raw:
        raise EmptyInput("nothing to normalise")
    maxima = [max(vals[i] for vals in raw.values()) for i in range(3)]
    return {
        key: tuple(v / m if m > 0 else 0.0 for v, m in zip(vals, maxima))  # type: ignore[misc]
        for key, vals in raw.items()
    }


def score_category(rt_n: float, cpu_n: float, w: StrategyWeights) -> float:
    return w.w1 * rt_n + w.w2 * cpu_n


def score_pod(rt_n: float, cpu_n: float, e_n: float, w: StrategyWeights) -> float:
    return w.w1 * rt_n + w.w2 * cpu_n + w.w3 * e_n


def assign_category(
    metrics_by_category: Mapping[NodeCategory, tuple[float, float]],
    w: StrategyWeights,
    normalize: bool = True,
) -> NodeCategory:
    """Category with the lowest ``w1*rt + w2*cpu``; ties go to Medium."""
    present = [c for c in CATEGORIES if c in metrics_by_category]
    if not present:
        raise EmptyCategory("no category has live pods")
    raw = {c: (metrics_by_category[c][0], metrics_by_category[c][1], 0.0) for c in present}
    values = normalize_metrics(raw) if normalize else raw
    best = None
    best_score = math.inf
    # Medium iterated first so that an exact tie keeps it
    for c in reversed(present):
        s = score_category(values[c][0], values[c][1], w)
        if s < best_score:
            best, best_score = c, s
    return best  # type: ignore[return-value]


def scores_to_profile(
    scores: Mapping[str, float],
    epsilon: float = DEFAULT_EPSILON,
    version: int = 1,
    now_ms: float = 0.0,
    mapping: str = "inverse",
    tau: float = 0.1,
) -> ServiceProfile:
    """Turn cost scores into dispatch probabilities (lower score, higher probability).

    ``mapping="inverse"`` weights each pod by ``1/(score + epsilon*max_score)``,
    so multiplying every score by a constant leaves the result unchanged; an
    all-zero score map yields the uniform profile. ``mapping="softmax"`` uses
    ``exp(-score/(tau*max_score))``.
    """
    if not scores:
        raise EmptyInput("no scores to normalise")
    if any(s < 0 for s in scores.values()):
        raise ValueError("scores must be non-negative")
    ids = sorted(scores)
    top = max(scores.values())
    if top == 0:
        return ServiceProfile({p: 1.0 / len(ids) for p in ids}, version, now_ms)
    if mapping == "inverse":
        raw = [1.0 / (scores[p] / top + epsilon) for p in ids]
    elif mapping == "softmax":
        lo = min(scores.values())
        raw = [math.exp(-(scores[p] - lo) / (top * tau)) for p in ids]
    else:
        raise ValueError(f"unknown probability mapping {mapping!r}")
    total = math.fsum(raw)
    return ServiceProfile({p: r / total for p, r in zip(ids, raw)}, version, now_ms)


def sample_pod(profile: ServiceProfile, rng: np.random.Generator) -> str:
    """Inverse-CDF draw over the profile's pods in pod_id order; returns the pod_id."""
    if not profile.entries:
        raise EmptyProfile("cannot sample from an empty profile")
    u = rng.random()
    acc = 0.0
    last = None
    for pod_id in sorted(profile.entries):
        p = profile.entries[pod_id]
        if p <= 0:
            continue
        acc += p
        last = pod_id
        if u < acc:
            return pod_id
    # u landed in the rounding slack above the final cumulative sum
    return last  # type: ignore[return-value]


@dataclass
class RoundRobinState:
    """Per-service cursor emulating the orchestrator's service proxy.

    The cursor resets to zero whenever the service's membership changes.
    """

    cursors: dict[str, int] = field(default_factory=dict)
    members: dict[str, tuple[str, ...]] = field(default_factory=dict)


def round_robin_next(state: RoundRobinState, service_pods: Sequence[PodRef], service_id: str = "") -> PodRef:
    if not service_pods:
        raise EmptyService(f"service {service_id!r} has no pods")
    membership = tuple(p.pod_id for p in service_pods)
    if state.members.get(service_id) != membership:
        state.members[service_id] = membership
        state.cursors[service_id] = 0
    idx = state.cursors.get(service_id, 0) % len(service_pods)
    state.cursors[service_id] = (idx + 1) % len(service_pods)
    return service_pods[idx]


@dataclass
class ClusterState:
    """What the dispatcher sees when it places a task.

    ``pods`` lists live pods per category in service order. The round-robin
    state and static-split cursor are the only fields ``decide`` mutates.
    """

    pods: dict[NodeCategory, list[PodRef]]
    weights: StrategyWeights = field(default_factory=StrategyWeights)
    profile: ServiceProfile | None = None
    category_metrics: dict[NodeCategory, tuple[float, float]] = field(default_factory=dict)
    rr: RoundRobinState = field(default_factory=RoundRobinState)
    split_cursor: int = 0
    normalize: bool = True

    def live(self) -> list[PodRef]:
        return [p for c in CATEGORIES for p in self.pods.get(c, [])]


def _live_categories(cluster: ClusterState) -> list[NodeCategory]:
    return [c for c in CATEGORIES if cluster.pods.get(c)]


def decide(strategy: StrategyKind, task: Task, cluster: ClusterState, rng: np.random.Generator) -> PodRef:
    cats = _live_categories(cluster)
    if not cats:
        raise NoLivePods(f"no live pod for task {task.task_id}")

    if strategy is StrategyKind.STATIC_SPLIT:
        c = cats[cluster.split_cursor % len(cats)]
        cluster.split_cursor += 1
        return round_robin_next(cluster.rr, cluster.pods[c], c.value)

    if strategy is StrategyKind.CATEGORY_ARGMIN:
        known = {c: cluster.category_metrics[c] for c in cats if c in cluster.category_metrics}
        if len(known) == len(cats):
            c = assign_category(known, cluster.weights, cluster.normalize)
        else:
            c = NodeCategory.MEDIUM if NodeCategory.MEDIUM in cats else cats[0]
        return round_robin_next(cluster.rr, cluster.pods[c], c.value)

    if strategy is StrategyKind.POD_LEVEL:
        by_id = {p.pod_id: p for p in cluster.live()}
        profile = cluster.profile
        if profile is None or not any(profile.probability(pid) > 0 for pid in by_id):
            profile = ServiceProfile.uniform(by_id)
        elif any(pid not in by_id for pid in profile.entries):
            profile = profile.restricted_to(by_id)
        return by_id[sample_pod(profile, rng)]

    raise ValueError(f"unknown strategy {strategy!r}")
