import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edge_offload.errors import BackendUnavailable, NoLivePods
from edge_offload.mapek import (
    MapeKLoop,
    ScalingAction,
    ScalingPolicy,
    Thresholds,
    analyze,
    execute,
    plan,
    run_loop,
)
from edge_offload.metrics import PodAggregate
from edge_offload.model import NodeCategory, ServiceProfile, StrategyKind, StrategyWeights

S, M = NodeCategory.SMALL, NodeCategory.MEDIUM


def agg(pid, cat, cpu, rt=100.0, e=400.0, fill=0.0):
    return PodAggregate(pid, cat, rt, cpu, e, fill)


def snapshot(small_cpus, medium_cpus):
    snap = {}
    for i, c in enumerate(small_cpus):
        snap[f"s{i}"] = agg(f"s{i}", S, c, 150.0, 600.0)
    for i, c in enumerate(medium_cpus):
        snap[f"m{i}"] = agg(f"m{i}", M, c, 55.0, 370.0)
    return snap


class FakeBackend:
    """Scripted backend: returns queued snapshots and records every call."""

    def __init__(self, snapshots, fail_at=None):
        self.snapshots = list(snapshots)
        self.calls = []
        self.profiles = []
        self.counts = {S: 5, M: 5}
        self.fail_at = fail_at
        self.n = 0

    def monitor(self, now_ms):
        self.n += 1
        if self.fail_at is not None and self.n >= self.fail_at:
            raise BackendUnavailable("gone")
        self.calls.append(("monitor", now_ms))
        return self.snapshots[min(self.n - 1, len(self.snapshots) - 1)]

    def swap_profile(self, profile):
        self.calls.append(("swap", profile.version))
        self.profiles.append(profile)

    def replicas(self):
        return dict(self.counts)

    def scale(self, category, target):
        self.calls.append(("scale", category, target))
        self.counts[category] = target


cpus = st.lists(st.floats(0, 1), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(small=cpus, medium=cpus)
def test_analyze_sets_disjoint(small, medium):
    f = analyze(snapshot(small, medium))
    assert not (f.overloaded_pods & f.underutilized_pods)
    assert 0.0 <= f.category_imbalance <= 1.0


def test_analyze_thresholds_and_pressure():
    snap = snapshot([0.8, 0.2, 0.5], [0.1])
    snap["m0"] = agg("m0", M, 0.1, fill=0.95)
    f = analyze(snap, Thresholds())
    assert f.overloaded_pods == {"s0"}
    assert f.underutilized_pods == {"s1", "m0"}
    assert f.category_imbalance == pytest.approx(0.4)
    assert f.drop_pressure


def test_plan_scales_up_when_any_pod_overloaded():
    snap = snapshot([0.9] + [0.5] * 4, [0.5] * 5)
    prof, actions = plan(analyze(snap), snap, StrategyWeights(), StrategyKind.POD_LEVEL)
    assert actions == [ScalingAction(S, 6)]
    assert prof.version == 1 and set(prof.entries) == set(snap)


def test_plan_scale_respects_bounds():
    up = snapshot([0.95] * 7, [0.1] * 5)
    _, actions = plan(analyze(up), up, StrategyWeights(), StrategyKind.POD_LEVEL)
    assert actions == []
    down = snapshot([0.1] * 6, [0.1] * 5)
    _, actions = plan(analyze(down), down, StrategyWeights(), StrategyKind.POD_LEVEL)
    assert actions == [ScalingAction(S, 5)]


def test_plan_static_split_can_be_pinned():
    snap = snapshot([0.9] * 5, [0.9] * 5)
    _, actions = plan(analyze(snap), snap, StrategyWeights(), StrategyKind.STATIC_SPLIT,
                      policy=ScalingPolicy(static_split_scales=False))
    assert actions == []
    prof, actions = plan(analyze(snap), snap, StrategyWeights(), StrategyKind.STATIC_SPLIT)
    assert prof is None and len(actions) == 2


def test_plan_prefers_cheaper_pods():
    snap = snapshot([0.5], [0.5])
    prof, _ = plan(analyze(snap), snap, StrategyWeights(), StrategyKind.POD_LEVEL)
    assert prof.entries["m0"] > prof.entries["s0"]


def test_plan_empty_snapshot():
    with pytest.raises(NoLivePods):
        plan(analyze({}), {}, StrategyWeights(), StrategyKind.POD_LEVEL)


def test_execute_swaps_profile_before_scaling():
    backend = FakeBackend([])
    ack = execute([ScalingAction(S, 6), ScalingAction(M, 5)], ServiceProfile({"a": 1.0}, 9), backend)
    assert backend.calls == [("swap", 9), ("scale", S, 6)]
    assert ack.profile_version == 9 and ack.applied == (ScalingAction(S, 6),)


def test_overload_reacts_within_two_iterations():
    calm = snapshot([0.5] * 5, [0.5] * 5)
    hot = snapshot([0.5] * 5, [0.95] + [0.5] * 4)
    backend = FakeBackend([calm, hot, hot])
    loop = MapeKLoop(backend, StrategyKind.POD_LEVEL)
    loop.iterate(0.0)
    assert not any(c[0] == "scale" for c in backend.calls)
    loop.iterate(1000.0)
    assert ("scale", M, 6) in backend.calls


def test_failed_plan_keeps_last_good_profile():
    good = snapshot([0.5], [0.5])
    backend = FakeBackend([good, {}])
    loop = MapeKLoop(backend, StrategyKind.POD_LEVEL)
    first = loop.iterate(0.0)
    second = loop.iterate(1000.0)
    assert second.error is not None
    assert loop.profile.version == first.profile_version
    assert backend.profiles[-1].version == first.profile_version


def test_backend_unavailable_propagates():
    loop = MapeKLoop(FakeBackend([snapshot([0.5], [0.5])], fail_at=1), StrategyKind.POD_LEVEL)
    with pytest.raises(BackendUnavailable):
        loop.iterate(0.0)


def test_run_loop_period():
    backend = FakeBackend([snapshot([0.5], [0.5])])
    loop = MapeKLoop(backend, StrategyKind.POD_LEVEL)

    async def go():
        return [e async for e in run_loop(loop, period_ms=100.0, duration_ms=1000.0)]

    events = asyncio.run(go())
    assert 9 <= len(events) <= 11
    gaps = [b.ts - a.ts for a, b in zip(events, events[1:])]
    assert all(80.0 <= g <= 130.0 for g in gaps)


def test_run_loop_stops_on_backend_loss():
    backend = FakeBackend([snapshot([0.5], [0.5])], fail_at=3)
    loop = MapeKLoop(backend, StrategyKind.POD_LEVEL)

    async def go():
        return [e async for e in run_loop(loop, period_ms=10.0, duration_ms=5000.0)]

    assert len(asyncio.run(go())) == 2
