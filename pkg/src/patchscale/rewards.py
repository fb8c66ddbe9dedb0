"""Localization, labeling and scale-consistency rewards and their weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError
from .scene import ClusterRegion, DetectionOutcome

log = logging.getLogger(__name__)

IOU_ELIGIBLE = 0.5


@dataclass(frozen=True)
class RewardWeights:
    alpha_l: float = 1.0
    alpha_c: float = 1.0
    alpha_s: float = 1.0

    def __post_init__(self):
        ws = (self.alpha_l, self.alpha_c, self.alpha_s)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ConfigError(f"reward weights must be >= 0 with at least one > 0, got {ws}")


@dataclass(frozen=True)
class RewardVector:
    r_l: float
    r_c: float
    r_s: float
    total: float

    @classmethod
    def combine(cls, r_l: float, r_c: float, r_s: float, weights: RewardWeights) -> "RewardVector":
        return cls(r_l, r_c, r_s, total_reward(r_l, r_c, r_s, weights))


@dataclass(frozen=True)
class NeighborGraph:
    """Same-category neighbor lists per region plus the normalization factor K."""

    neighbors: tuple[tuple[int, ...], ...]
    K: float

    def __post_init__(self):
        if not self.K > 0:
            raise ConfigError(f"normalization factor K must be positive, got {self.K}")

    @property
    def n(self) -> int:
        return len(self.neighbors)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=int)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.neighbors):
            adj[i, list(nb)] = 1.0
        return adj

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]


def build_neighbor_graph(
    regions: Sequence[ClusterRegion], radius: float = 256.0, k_max: int = 4, K: float = 2.5
) -> NeighborGraph:
    """Link each region to its ``k_max`` nearest same-category regions within ``radius``.

    The relation is symmetrized by union, so a region may end up with more
    than ``k_max`` neighbors.
    """
    if radius <= 0 or k_max < 1:
        raise ConfigError("neighbor radius must be > 0 and k_max >= 1")
    n = len(regions)
    centers = np.array([r.center for r in regions], dtype=float).reshape(n, 2)
    cats = [r.dominant_category for r in regions]
    links: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        cands = []
        for j in range(n):
            if j == i or cats[j] != cats[i]:
                continue
            dist = float(np.hypot(*(centers[i] - centers[j])))
            if dist <= radius:
                cands.append((dist, j))
        for _, j in sorted(cands)[:k_max]:
            links[i].add(j)
            links[j].add(i)
    return NeighborGraph(tuple(tuple(sorted(s)) for s in links), float(K))


def localization_reward(outcomes: Sequence[DetectionOutcome]) -> float:
    ious = [o.iou for o in outcomes if o.n_objects]
    if not ious:
        log.warning("localization reward on a scene with no objects; returning 0")
        return 0.0
    return float(np.concatenate(ious).mean())


def labeling_reward(outcomes: Sequence[DetectionOutcome]) -> float:
    """Accuracy over objects whose IoU is at least 0.5; 0 when none qualify."""
    eligible = sum(int(o.eligible.sum()) for o in outcomes)
    if eligible == 0:
        return 0.0
    correct = sum(int((o.label_correct & o.eligible).sum()) for o in outcomes)
    return correct / eligible


def _consistency_terms(scales: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """exp(-Delta_i / K) for each region; rows of ``scales`` are assignments."""
    counts = graph.counts
    deltas = np.zeros(scales.shape)
    for i, nb in enumerate(graph.neighbors):
        if nb:
            deltas[:, i] = np.abs(scales[:, [i]] - scales[:, list(nb)]).sum(axis=1) / counts[i]
    return np.exp(-deltas / graph.K)


def scale_consistency_reward(scales: Sequence[float], graph: NeighborGraph) -> float:
    """Mean over regions of exp(-Delta_i/K); isolated regions score 1."""
    lam = np.asarray(scales, dtype=float)
    if lam.shape != (graph.n,):
        raise ValueError(f"need one scale per region ({graph.n}), got shape {lam.shape}")
    if graph.n == 0:
        return 1.0
    return float(_consistency_terms(lam[None, :], graph).mean())


def scale_consistency_batch(scales: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """Vectorized :func:`scale_consistency_reward` over the rows of ``scales``."""
    scales = np.asarray(scales, dtype=float)
    if scales.ndim != 2 or scales.shape[1] != graph.n:
        raise ValueError(f"need shape (m, {graph.n}), got {scales.shape}")
    if graph.n == 0:
        return np.ones(scales.shape[0])
    return _consistency_terms(scales, graph).mean(axis=1)


def total_reward(r_l: float, r_c: float, r_s: float, weights: RewardWeights) -> float:
    return weights.alpha_l * r_l + weights.alpha_c * r_c + weights.alpha_s * r_s
