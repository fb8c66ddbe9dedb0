import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from patchscale.config import RunConfig
from patchscale.environment import Task
from patchscale.estimator import ScaleSelector, check_scenes
from patchscale.scene import generate_scene

SMALL = ("features.dim=8", "agent.gate_reduction=2", "evolution.population=4", "evolution.iterations=2")


def _scenes(seeds):
    return [generate_scene(RunConfig().scene, s) for s in seeds]


def _est(**kw):
    return ScaleSelector(episodes=2, steps=1, batch_scenes=2, overrides=SMALL, **kw)


def test_params_roundtrip_and_clone():
    est = _est(alpha_s=0.0)
    assert est.get_params()["alpha_s"] == 0.0
    c = clone(est)
    assert c.get_params() == est.get_params()


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        _est().predict(_scenes([0]))


def test_fit_predict_shapes_and_score():
    est = _est().fit(_scenes([1, 2, 3]))
    X = _scenes([10, 11])
    preds = est.predict(X)
    settings = est.config_.env_settings()
    for scene, lam in zip(X, preds):
        task = Task.from_scene(scene, settings)
        assert lam.shape == (task.n_regions,)
        assert set(lam.tolist()) <= set(est.config_.actions.scales)
    want = np.mean([Task.from_scene(s, settings).evaluate(l).total for s, l in zip(X, preds)])
    assert abs(est.score(X) - want) < 1e-12
    feats = est.transform(X)
    assert feats[0].shape[1] == est.config_.features.dim


def test_fit_without_scenes_is_deterministic():
    a = _est(random_state=3).fit()
    b = _est(random_state=3).fit()
    X = _scenes([20])
    np.testing.assert_array_equal(a.predict(X)[0], b.predict(X)[0])


def test_check_scenes():
    s = _scenes([0])[0]
    assert check_scenes(s) == [s]
    assert check_scenes(None, allow_none=True) is None
    with pytest.raises(ValueError):
        check_scenes([])
    with pytest.raises(TypeError):
        check_scenes([1, 2])
    with pytest.raises(ValueError):
        check_scenes(None)
