import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchscale.config import RunConfig
from patchscale.environment import Task
from patchscale.exceptions import ConfigError
from patchscale.rewards import (
    NeighborGraph,
    RewardWeights,
    build_neighbor_graph,
    labeling_reward,
    localization_reward,
    scale_consistency_batch,
    scale_consistency_reward,
    total_reward,
)
from patchscale.scene import ClusterRegion, DetectionOutcome, SceneObject, generate_scene

from oracles import naive_rs


def _out(ious, correct, rid=0):
    return DetectionOutcome(rid, 1.0, np.array(ious, dtype=float), np.array(correct, dtype=bool))


def _region_at(rid, cx, cy, category, n_categories=4):
    obj = SceneObject(rid, category, (cx - 5, cy - 5, 10, 10))
    return ClusterRegion(rid, obj.bbox, (obj,), n_categories)


def test_localization_all_perfect():
    assert localization_reward([_out([1, 1], [1, 1]), _out([1], [0])]) == 1.0


def test_localization_mean():
    assert localization_reward([_out([0.2, 0.8], [1, 1])]) == 0.5


def test_localization_three_regions_hand_sum():
    outs = [_out([0.1, 0.4], [1, 1]), _out([0.9], [0]), _out([0.3, 0.6, 0.2], [1, 0, 1])]
    assert abs(localization_reward(outs) - (0.1 + 0.4 + 0.9 + 0.3 + 0.6 + 0.2) / 6) < 1e-15


def test_localization_empty_is_zero(caplog):
    assert localization_reward([]) == 0.0
    assert "no objects" in caplog.text


def test_labeling_cases():
    assert labeling_reward([_out([0.6, 0.9], [1, 1])]) == 1.0
    assert labeling_reward([_out([0.6, 0.4, 0.7], [1, 1, 0])]) == 0.5
    assert labeling_reward([_out([0.1, 0.49], [1, 1])]) == 0.0


def test_rs_all_equal():
    g = NeighborGraph(((1, 2), (0, 2), (0, 1)), 2.5)
    assert scale_consistency_reward([1.5, 1.5, 1.5], g) == 1.0


def test_rs_two_neighbors_gap_K():
    K = 2.5
    g = NeighborGraph(((1,), (0,)), K)
    assert abs(scale_consistency_reward([1.0, 1.0 + K], g) - math.exp(-1)) <= 1e-12


def test_rs_isolated():
    g = NeighborGraph(((), (), ()), 1.0)
    assert scale_consistency_reward([0.5, 2.0, 3.0], g) == 1.0


def test_rs_bad_K():
    with pytest.raises(ConfigError):
        NeighborGraph(((),), 0.0)


def _random_graph(rng, n):
    adj = np.triu(rng.random((n, n)) < 0.4, 1)
    adj = adj | adj.T
    return NeighborGraph(tuple(tuple(np.flatnonzero(adj[i]).tolist()) for i in range(n)),
                         float(rng.uniform(0.5, 3)))


def test_rs_matches_naive_and_batch(rng):
    for _ in range(100):
        n = int(rng.integers(1, 8))
        g = _random_graph(rng, n)
        lam = rng.choice([0.5, 1.0, 1.5, 2.0, 2.5, 3.0], size=(4, n))
        batch = scale_consistency_batch(lam, g)
        for row, b in zip(lam, batch):
            ref = naive_rs(row.tolist(), g.neighbors, g.K)
            assert abs(scale_consistency_reward(row, g) - ref) < 1e-12
            assert abs(b - ref) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_rs_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    g = _random_graph(rng, 6)
    lam = rng.uniform(0.5, 3, size=6)
    assert abs(scale_consistency_reward(lam, g) - scale_consistency_reward(lam + shift, g)) < 1e-12


def test_rs_decreases_when_gap_grows(rng):
    g = NeighborGraph(((1, 2), (0,), (0,)), 2.5)
    lam = np.array([1.0, 1.5, 2.0])
    wider = lam.copy()
    wider[1] = 1.8  # gap |lam0 - lam1| grows from 0.5 to 0.8, others fixed
    assert scale_consistency_reward(wider, g) < scale_consistency_reward(lam, g)


def test_total_reward_examples():
    w1 = RewardWeights()
    assert total_reward(0.5, 0.5, 1.0, w1) == 2.0
    assert total_reward(0, 0, 0, w1) == 0.0
    assert abs(total_reward(0.3, 0.6, 0.9, RewardWeights(2, 1, 0.5)) - 1.65) < 1e-15


def test_weights_validation():
    with pytest.raises(ConfigError):
        RewardWeights(0, 0, 0)
    with pytest.raises(ConfigError):
        RewardWeights(-1, 1, 1)


def test_neighbor_graph_cases():
    g = build_neighbor_graph([_region_at(0, 100, 100, 1), _region_at(1, 110, 100, 1)], radius=50)
    assert g.neighbors == ((1,), (0,))
    g = build_neighbor_graph([_region_at(0, 100, 100, 1), _region_at(1, 105, 100, 2)], radius=50)
    assert g.neighbors == ((), ())


def test_neighbor_graph_five_regions_hand_built():
    # same category everywhere; radius 60 cuts only the 0-3 pair (distance 61)
    pts = [(100, 100), (150, 100), (100, 150), (161, 100), (500, 500)]
    regions = [_region_at(i, x, y, 0) for i, (x, y) in enumerate(pts)]
    g = build_neighbor_graph(regions, radius=60, k_max=4)
    # distances: 0-1 50, 0-2 50, 1-2 70.7, 1-3 11, 2-3 79.1, 0-3 61, 4 far from all
    assert g.neighbors == ((1, 2), (0, 3), (0,), (1,), ())


def test_neighbor_graph_k_max_and_symmetry(rng):
    for seed in range(30):
        scene = generate_scene(RunConfig().scene, seed)
        task = Task.from_scene(scene, RunConfig().env_settings())
        adj = task.graph.adjacency()
        assert np.array_equal(adj, adj.T)
        assert np.all(np.diag(adj) == 0)
        cats = [r.dominant_category for r in task.regions]
        for i, j in task.graph.edges():
            assert cats[i] == cats[j]


@pytest.mark.parametrize("seed", range(25))
def test_all_rewards_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    task = Task.from_scene(generate_scene(RunConfig().scene, seed), RunConfig().env_settings())
    for _ in range(10):
        rv = task.evaluate(rng.choice(task.actions, size=task.n_regions))
        for v in (rv.r_l, rv.r_c, rv.r_s):
            assert 0.0 <= v <= 1.0
        assert abs(rv.total - (rv.r_l + rv.r_c + rv.r_s)) < 1e-15
