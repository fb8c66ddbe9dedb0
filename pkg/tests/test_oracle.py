import itertools
from dataclasses import replace

import numpy as np
import pytest

from patchscale.config import RunConfig
from patchscale.environment import EnvSettings, RewardTable, Task
from patchscale.exceptions import OracleCapError
from patchscale.oracle import coordinate_ascent, exhaustive, oracle_scales, sweep_single
from patchscale.scene import DetectorModel, Scene, SceneConfig, SceneObject, generate_scene

SETTINGS = EnvSettings()


def _scene(objs, seed=0):
    return Scene(1024, 1024, tuple(objs), seed, 4)


def _small_tasks(max_regions=4, count=15):
    cfg = replace(SceneConfig(), min_objects=1, max_objects=5)
    out = []
    seed = 0
    while len(out) < count:
        t = Task.from_scene(generate_scene(cfg, seed), SETTINGS)
        if t.n_regions <= max_regions:
            out.append(t)
        seed += 1
    return out


def test_exhaustive_matches_itertools_through_direct_path():
    for task in _small_tasks():
        best, best_val = None, -np.inf
        for combo in itertools.product(range(6), repeat=task.n_regions):
            v = task.evaluate(task.actions[list(combo)]).total
            if v > best_val + 1e-12:
                best, best_val = combo, v
        res = exhaustive(task)
        assert abs(res.reward - best_val) < 1e-12
        assert abs(task.evaluate(res.scales).total - best_val) < 1e-12


def test_single_region_oracle_equals_sweep():
    obj = SceneObject(0, 2, (400, 400, 12, 12))
    task = Task.from_scene(_scene([obj]), SETTINGS)
    ex, sw = exhaustive(task), sweep_single(task)
    assert ex.action_idx == sw.action_idx and abs(ex.reward - sw.reward) < 1e-12
    assert ex.evaluations == 6
    assert task.evaluate(ex.scales).r_s == 1.0


def test_symmetric_pair_gets_equal_scales():
    objs = [SceneObject(0, 1, (300, 300, 14, 14)), SceneObject(1, 1, (400, 300, 14, 14))]
    task = Task.from_scene(_scene(objs), SETTINGS)
    assert task.n_regions == 2 and task.graph.neighbors == ((1,), (0,))
    res = exhaustive(task)
    assert res.evaluations == 36
    assert res.scales[0] == res.scales[1]


def test_eight_region_full_enumeration():
    cfg = RunConfig()
    scfg = replace(cfg.scene, min_objects=8, max_objects=8, max_zones=3)
    for seed in range(200):
        task = Task.from_scene(generate_scene(scfg, seed), cfg.env_settings())
        if task.n_regions == 8:
            break
    else:
        pytest.fail("no 8-region scene found")
    res = exhaustive(task)
    assert res.evaluations == 6**8 == 1_679_616
    assert abs(task.evaluate(res.scales).total - res.reward) < 1e-12
    # no single-region change improves on the global optimum
    for i in range(8):
        for k in range(6):
            cand = list(res.action_idx)
            cand[i] = k
            assert task.table.score(np.array(cand))[0] <= res.reward + 1e-12


def test_cap_refusal_names_cap():
    task = _small_tasks(count=1)[0]
    with pytest.raises(OracleCapError, match="cap of 5"):
        exhaustive(task, cap=5)


def test_coordinate_ascent_is_bounded_by_exhaustive():
    for task in _small_tasks():
        ca, ex = coordinate_ascent(task), exhaustive(task)
        assert ca.reward <= ex.reward + 1e-12
        assert ca.iterations >= 1 and ca.mode == "coordinate"
        assert abs(task.evaluate(ca.scales).total - ca.reward) < 1e-12


def test_oracle_mode_dispatch():
    task = _small_tasks(count=1)[0]
    assert oracle_scales(task, "coordinate").mode == "coordinate"
    with pytest.raises(ValueError):
        oracle_scales(task, "anneal")


def test_reward_table_matches_direct_path_noisy_and_clean(rng):
    for noise in (0.0, 0.2):
        settings = replace(SETTINGS, model=replace(DetectorModel(), noise_sd=noise))
        for seed in range(10):
            task = Task.from_scene(generate_scene(SceneConfig(), seed), settings)
            for _ in range(5):
                idx = rng.integers(6, size=task.n_regions)
                a = task.table.components(idx)
                b = task.evaluate(task.actions[idx])
                for x, y in zip(a, (b.r_l, b.r_c, b.r_s, b.total)):
                    assert abs(x[0] - y) < 1e-12


def test_vectorized_table_equals_loop():
    for seed in range(10):
        task = Task.from_scene(generate_scene(SceneConfig(), seed), SETTINGS)
        fast = task.table
        slow = RewardTable.build(Task.from_scene(task.scene, replace(
            SETTINGS, model=replace(DetectorModel(), noise_sd=1e-300))))
        # noise 1e-300 takes the per-region path; its IoUs equal the clean ones
        np.testing.assert_allclose(fast.iou_sum, slow.iou_sum, atol=1e-12)
        np.testing.assert_array_equal(fast.n_eligible, slow.n_eligible)


def test_oracle_deterministic():
    task = _small_tasks(count=1)[0]
    assert exhaustive(task) == exhaustive(Task.from_scene(task.scene, SETTINGS))
