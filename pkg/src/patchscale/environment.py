"""A scene prepared for scale selection: regions, neighbor graph, and reward evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rewards import (
    IOU_ELIGIBLE,
    NeighborGraph,
    RewardVector,
    RewardWeights,
    build_neighbor_graph,
    labeling_reward,
    localization_reward,
    scale_consistency_batch,
    scale_consistency_reward,
)
from .scene import ClusterRegion, DetectionOutcome, DetectorModel, Scene, build_regions, simulate_detection

DEFAULT_ACTIONS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class EnvSettings:
    """Everything besides the scene that fixes how an assignment is scored."""

    model: DetectorModel = DetectorModel()
    weights: RewardWeights = RewardWeights()
    action_set: tuple[float, ...] = DEFAULT_ACTIONS
    beta: float = 1.5
    merge_iou: float = 0.3
    radius: float = 256.0
    k_max: int = 4
    K: float | None = None  # None: span of the action set

    @property
    def norm_k(self) -> float:
        return self.K if self.K is not None else max(self.action_set) - min(self.action_set)


def region_seed(scene_seed: int, region_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(scene_seed) & (2**63 - 1), int(region_id)])


@dataclass
class Task:
    scene: Scene
    regions: list[ClusterRegion]
    graph: NeighborGraph
    settings: EnvSettings
    _table: "RewardTable | None" = field(default=None, repr=False)

    @classmethod
    def from_scene(cls, scene: Scene, settings: EnvSettings) -> "Task":
        regions = build_regions(scene, settings.beta, settings.merge_iou)
        graph = build_neighbor_graph(regions, settings.radius, settings.k_max, settings.norm_k)
        return cls(scene, regions, graph, settings)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def actions(self) -> np.ndarray:
        return np.asarray(self.settings.action_set, dtype=float)

    def outcomes(self, scales: Sequence[float]) -> list[DetectionOutcome]:
        noisy = self.settings.model.noise_sd > 0
        return [
            simulate_detection(r, float(s), self.settings.model,
                               region_seed(self.scene.seed, r.id) if noisy else None)
            for r, s in zip(self.regions, scales)
        ]

    def evaluate(self, scales: Sequence[float]) -> RewardVector:
        """Score an assignment through the per-object reward definitions."""
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (self.n_regions,):
            raise ValueError(f"need {self.n_regions} scales, got shape {scales.shape}")
        outs = self.outcomes(scales)
        return RewardVector.combine(
            localization_reward(outs),
            labeling_reward(outs),
            scale_consistency_reward(scales, self.graph),
            self.settings.weights,
        )

    @property
    def table(self) -> "RewardTable":
        if self._table is None:
            self._table = RewardTable.build(self)
        return self._table


@dataclass(frozen=True)
class RewardTable:
    """Per-region, per-action detection statistics for fast batch scoring.

    Valid because each region's outcome depends only on its own scale.
    """

    iou_sum: np.ndarray  # (N, A)
    n_eligible: np.ndarray  # (N, A)
    n_correct: np.ndarray  # (N, A)
    n_objects: int
    actions: np.ndarray
    graph: NeighborGraph
    weights: RewardWeights

    @classmethod
    def build(cls, task: Task) -> "RewardTable":
        if task.settings.model.noise_sd == 0:
            return cls._build_noise_free(task)
        n, a = task.n_regions, len(task.settings.action_set)
        iou_sum = np.zeros((n, a))
        n_elig = np.zeros((n, a))
        n_corr = np.zeros((n, a))
        for k, scale in enumerate(task.settings.action_set):
            for i, out in enumerate(task.outcomes([scale] * n)):
                elig = out.iou >= IOU_ELIGIBLE
                iou_sum[i, k] = out.iou.sum()
                n_elig[i, k] = elig.sum()
                n_corr[i, k] = (elig & out.label_correct).sum()
        n_obj = sum(len(r.objects) for r in task.regions)
        return cls(iou_sum, n_elig, n_corr, n_obj, task.actions, task.graph, task.settings.weights)

    @classmethod
    def _build_noise_free(cls, task: Task) -> "RewardTable":
        """Same statistics as the per-region loop, evaluated for all objects at once."""
        model = task.settings.model
        objs = [(i, o) for i, r in enumerate(task.regions) for o in r.objects]
        owner = np.array([i for i, _ in objs])
        px = np.array([o.px_size for _, o in objs])[:, None]
        opt = np.array([model.optimum(o.category) for _, o in objs])[:, None]
        acts = task.actions[None, :]
        z2 = np.log2(acts * px / opt) ** 2
        penalty = model.artifact_slope * np.maximum(0.0, acts - model.max_scale)
        loc = np.clip(np.exp(-z2 / (2.0 * model.loc_width**2)) - penalty, 0.0, 1.0)
        cls_q = np.clip(np.exp(-z2 / (2.0 * model.cls_width**2)) - penalty, 0.0, 1.0)
        elig = loc >= IOU_ELIGIBLE
        shape = (task.n_regions, acts.size)
        iou_sum, n_elig, n_corr = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        np.add.at(iou_sum, owner, loc)
        np.add.at(n_elig, owner, elig)
        np.add.at(n_corr, owner, elig & (cls_q >= 0.5))
        return cls(iou_sum, n_elig, n_corr, len(objs), task.actions, task.graph, task.settings.weights)

    def score(self, action_idx: np.ndarray) -> np.ndarray:
        """Total reward for each row of an (m, N) matrix of action indices."""
        return self.components(action_idx)[3]

    def components(self, action_idx: np.ndarray):
        idx = np.asarray(action_idx, dtype=np.int64)
        if idx.ndim == 1:
            idx = idx[None, :]
        rows = np.arange(idx.shape[1])
        r_l = self.iou_sum[rows, idx].sum(axis=1) / max(self.n_objects, 1)
        elig = self.n_eligible[rows, idx].sum(axis=1)
        corr = self.n_correct[rows, idx].sum(axis=1)
        r_c = np.divide(corr, elig, out=np.zeros_like(corr), where=elig > 0)
        r_s = scale_consistency_batch(self.actions[idx], self.graph)
        w = self.weights
        total = w.alpha_l * r_l + w.alpha_c * r_c + w.alpha_s * r_s
        return r_l, r_c, r_s, total
