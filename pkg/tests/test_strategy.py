import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from edge_offload.errors import EmptyCategory, EmptyInput, EmptyService, NoLivePods
from edge_offload.model import NodeCategory, PodRef, ServiceProfile, StrategyKind, StrategyWeights, Task
from edge_offload.strategy import (
    ClusterState,
    RoundRobinState,
    assign_category,
    decide,
    normalize_metrics,
    round_robin_next,
    sample_pod,
    score_pod,
    scores_to_profile,
)

S, M = NodeCategory.SMALL, NodeCategory.MEDIUM


def pods(category, n):
    return [PodRef(f"{category.value}-{i:02d}", category.value, category) for i in range(n)]


def test_normalize_divides_by_column_max():
    out = normalize_metrics({"a": (100.0, 0.5, 0.0), "b": (50.0, 1.0, 0.0)})
    assert out == {"a": (1.0, 0.5, 0.0), "b": (0.5, 1.0, 0.0)}
    with pytest.raises(EmptyInput):
        normalize_metrics({})


def test_score_pod_weighted_sum():
    assert score_pod(1.0, 0.5, 0.25, StrategyWeights()) == pytest.approx(0.5 + 0.15 + 0.05)


def test_assign_category_prefers_lower_score():
    w = StrategyWeights()
    assert assign_category({S: (150.0, 0.2), M: (55.0, 0.2)}, w) is M
    assert assign_category({S: (50.0, 0.1), M: (55.0, 0.9)}, w) is S


def test_assign_category_tie_keeps_medium():
    assert assign_category({S: (100.0, 0.5), M: (100.0, 0.5)}, StrategyWeights()) is M


def test_assign_category_empty():
    with pytest.raises(EmptyCategory):
        assign_category({}, StrategyWeights())


def test_inverse_mapping_example():
    # 1/2 : 1/1 normalised -> 1/3, 2/3
    p = scores_to_profile({"a": 2.0, "b": 1.0}, epsilon=0.0)
    assert p.entries == pytest.approx({"a": 1 / 3, "b": 2 / 3})


def test_all_zero_scores_uniform():
    assert scores_to_profile({"a": 0.0, "b": 0.0, "c": 0.0}).entries == pytest.approx(dict.fromkeys("abc", 1 / 3))


def test_scores_rejects_bad_input():
    with pytest.raises(EmptyInput):
        scores_to_profile({})
    with pytest.raises(ValueError):
        scores_to_profile({"a": -1.0})
    with pytest.raises(ValueError):
        scores_to_profile({"a": 1.0}, mapping="magic")


score_maps = st.dictionaries(
    st.text("abcdefgh", min_size=1, max_size=4),
    st.floats(0, 1e3, allow_nan=False),
    min_size=1,
    max_size=14,
)


@settings(max_examples=300, deadline=None)
@given(scores=score_maps, mapping=st.sampled_from(["inverse", "softmax"]))
def test_profile_sums_to_one_and_is_antitone(scores, mapping):
    p = scores_to_profile(scores, mapping=mapping)
    assert math.fsum(p.entries.values()) == pytest.approx(1.0, abs=1e-9)
    assert all(v >= 0 for v in p.entries.values())
    ids = sorted(scores)
    for a in ids:
        for b in ids:
            if scores[a] < scores[b]:
                assert p.entries[a] >= p.entries[b]


@settings(max_examples=200, deadline=None)
@given(scores=score_maps, k=st.floats(1e-3, 1e3))
def test_profile_scale_invariant(scores, k):
    assume(max(scores.values()) > 1e-6)
    a = scores_to_profile(scores).entries
    b = scores_to_profile({p: s * k for p, s in scores.items()}).entries
    for pid in a:
        assert b[pid] == pytest.approx(a[pid], rel=1e-6, abs=1e-12)


def test_sample_pod_golden_first_draw():
    profile = ServiceProfile({"c": 0.5, "a": 0.2, "b": 0.3})
    # independent oracle: same stream, cumulative walk over sorted ids
    u = np.random.default_rng(42).random()
    cum, expected = 0.0, None
    for pid, p in [("a", 0.2), ("b", 0.3), ("c", 0.5)]:
        cum += p
        if u < cum:
            expected = pid
            break
    assert sample_pod(profile, np.random.default_rng(42)) == expected


def test_sample_pod_skips_zero_probability():
    profile = ServiceProfile({"a": 0.0, "b": 1.0})
    rng = np.random.default_rng(0)
    assert {sample_pod(profile, rng) for _ in range(200)} == {"b"}


def test_round_robin_cycles_and_resets():
    state = RoundRobinState()
    members = pods(S, 3)
    got = [round_robin_next(state, members, "s").pod_id for _ in range(4)]
    assert got == ["small-00", "small-01", "small-02", "small-00"]
    grown = pods(S, 4)
    assert round_robin_next(state, grown, "s").pod_id == "small-00"
    with pytest.raises(EmptyService):
        round_robin_next(state, [], "s")


def test_decide_static_split_alternates_categories():
    cluster = ClusterState({S: pods(S, 2), M: pods(M, 2)})
    rng = np.random.default_rng(0)
    got = [decide(StrategyKind.STATIC_SPLIT, Task(str(i), "t", 0.0), cluster, rng).pod_id for i in range(6)]
    assert got == ["small-00", "medium-00", "small-01", "medium-01", "small-00", "medium-00"]


def test_decide_category_argmin_uses_metrics():
    cluster = ClusterState({S: pods(S, 2), M: pods(M, 2)}, category_metrics={S: (150.0, 0.3), M: (55.0, 0.3)})
    rng = np.random.default_rng(0)
    chosen = {decide(StrategyKind.CATEGORY_ARGMIN, Task(str(i), "t", 0.0), cluster, rng).category for i in range(5)}
    assert chosen == {M}


def test_decide_pod_level_follows_profile_and_drops_dead_pods():
    live = pods(S, 1) + pods(M, 1)
    profile = ServiceProfile({"small-00": 0.1, "medium-00": 0.3, "gone": 0.6})
    cluster = ClusterState({S: live[:1], M: live[1:]}, profile=profile)
    rng = np.random.default_rng(3)
    draws = [decide(StrategyKind.POD_LEVEL, Task(str(i), "t", 0.0), cluster, rng).pod_id for i in range(4000)]
    assert set(draws) == {"small-00", "medium-00"}
    assert draws.count("medium-00") / len(draws) == pytest.approx(0.75, abs=0.03)


def test_decide_without_pods():
    with pytest.raises(NoLivePods):
        decide(StrategyKind.POD_LEVEL, Task("x", "t", 0.0), ClusterState({}), np.random.default_rng(0))
