"""scikit-learn style wrapper: fit on scenes, predict per-region scales."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .environment import Task
from .scene import Scene
from . import trainer


def check_scenes(X, allow_none: bool = False) -> list[Scene] | None:
    """Validate a sequence of :class:`Scene` objects; returns it as a list."""
    if X is None:
        if allow_none:
            return None
        raise ValueError("expected a sequence of Scene objects, got None")
    if isinstance(X, Scene):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"element {i} is {type(s).__name__}, expected Scene")
        if not s.objects:
            raise ValueError(f"scene {i} (seed {s.seed}) has no objects")
    return scenes


class ScaleSelector(BaseEstimator):
    """Learns a per-region scaling policy.

    ``fit(X)`` trains on the given scenes (or on freshly generated ones when
    ``X`` is None); ``predict(X)`` returns one scale array per scene, aligned
    with the scene's merged regions; ``transform(X)`` returns the attended
    region features; ``score(X)`` is the mean total reward.
    """

    def __init__(self, episodes: int = 50, steps: int = 5, batch_scenes: int = 8,
                 use_attention: bool = True, use_evolution: bool = True, alpha_s: float = 1.0,
                 gamma: float = 0.99, random_state: int = 0, overrides: Sequence[str] = ()):
        self.episodes = episodes
        self.steps = steps
        self.batch_scenes = batch_scenes
        self.use_attention = use_attention
        self.use_evolution = use_evolution
        self.alpha_s = alpha_s
        self.gamma = gamma
        self.random_state = random_state
        self.overrides = overrides

    def _config(self) -> RunConfig:
        return RunConfig().with_overrides([
            *self.overrides,
            f"train.episodes={int(self.episodes)}",
            f"train.steps={int(self.steps)}",
            f"train.batch_scenes={int(self.batch_scenes)}",
            f"train.seed={int(self.random_state)}",
            f"attention.enabled={str(bool(self.use_attention)).lower()}",
            f"evolution.enabled={str(bool(self.use_evolution)).lower()}",
            f"rewards.alpha_s={float(self.alpha_s)!r}",
            f"agent.gamma={float(self.gamma)!r}",
        ])

    def fit(self, X=None, y=None):
        scenes = check_scenes(X, allow_none=True)
        self.config_ = self._config()
        state = trainer.train(self.config_, scenes=scenes)
        self.agent_ = state.agent
        self.history_ = state.history
        self.metrics_ = state.metrics
        return self

    def _tasks(self, X) -> list[Task]:
        check_is_fitted(self, "agent_")
        settings = self.config_.env_settings()
        return [Task.from_scene(s, settings) for s in check_scenes(X)]

    def predict(self, X) -> list[np.ndarray]:
        tasks = self._tasks(X)
        res = trainer.evaluate(self.agent_, tasks, self.config_, self.history_,
                               use_evolution=self.use_evolution)
        return res.assignments

    def transform(self, X) -> list[np.ndarray]:
        tasks = self._tasks(X)
        return [self.agent_.attended(self.agent_.make_batch([t])).data for t in tasks]

    def score(self, X, y=None) -> float:
        tasks = self._tasks(X)
        return trainer.evaluate(self.agent_, tasks, self.config_, self.history_,
                                use_evolution=self.use_evolution).mean_reward
