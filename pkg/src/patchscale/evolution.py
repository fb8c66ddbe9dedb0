"""Elitist refinement of the actor's scale assignment.

Genomes are action-index vectors; the scaling factor of gene ``i`` is
``action_set[genes[i]]``. Fitness is the scale-consistency reward.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rewards import NeighborGraph, scale_consistency_batch

TIE_TOL = 1e-12


@dataclass
class Individual:
    genes: np.ndarray
    fitness: float = float("nan")

    def scales(self, action_set: Sequence[float]) -> np.ndarray:
        return np.asarray(action_set, dtype=float)[self.genes]


@dataclass
class Population:
    genes: np.ndarray  # (W, N) action indices
    generation: int = 0

    @property
    def size(self) -> int:
        return self.genes.shape[0]

    def individuals(self) -> list[Individual]:
        return [Individual(g.copy()) for g in self.genes]


@dataclass
class HistoryEntry:
    genes: np.ndarray
    reward: float
    signature: int


class HistoryBuffer:
    """Bounded archive of past best assignments, oldest evicted first."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[HistoryEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def append(self, genes: np.ndarray, reward: float) -> None:
        genes = np.asarray(genes, dtype=np.int64).copy()
        self._entries.append(HistoryEntry(genes, float(reward), int(genes.size)))

    def top(self, k: int) -> list[HistoryEntry]:
        """Best ``k`` entries by reward; equal rewards keep insertion order."""
        ranked = sorted(enumerate(self._entries), key=lambda e: (-e[1].reward, e[0]))
        return [e for _, e in ranked[:k]]

    def to_json(self) -> dict:
        return {
            "capacity": self.capacity,
            "entries": [
                {"genes": e.genes.tolist(), "reward": e.reward, "signature": e.signature}
                for e in self._entries
            ],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "HistoryBuffer":
        buf = cls(int(blob["capacity"]))
        for e in blob["entries"]:
            buf._entries.append(HistoryEntry(np.asarray(e["genes"], dtype=np.int64),
                                             float(e["reward"]), int(e["signature"])))
        return buf


def record_best(genes: np.ndarray, reward: float, history: HistoryBuffer) -> HistoryBuffer:
    history.append(genes, reward)
    return history


def adapt_length(genes: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Truncate, or extend with the reference genes at the missing positions."""
    n = reference.size
    if genes.size >= n:
        return genes[:n].copy()
    return np.concatenate([genes, reference[genes.size:]])


def mutate(genes: np.ndarray, p_mut: float, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    """Move each gene one step up or down the action list with probability ``p_mut``."""
    if not 0 <= p_mut <= 1:
        raise ValueError(f"p_mut must be in [0, 1], got {p_mut}")
    genes = np.asarray(genes, dtype=np.int64)
    hit = rng.random(genes.shape) < p_mut
    step = np.where(rng.random(genes.shape) < 0.5, -1, 1)
    moved = genes + step
    # clamp by reflecting off the ends so a forced mutation always changes the gene
    moved = np.where(moved < 0, 1, moved)
    moved = np.where(moved >= n_actions, n_actions - 2, moved)
    if n_actions == 1:
        moved = genes
    return np.where(hit, moved, genes)


def crossover(parent_a: np.ndarray, parent_b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform crossover: each gene from either parent with probability 1/2."""
    a, b = np.asarray(parent_a), np.asarray(parent_b)
    if a.shape != b.shape:
        raise ValueError(f"parents differ in length: {a.shape} vs {b.shape}")
    return np.where(rng.random(a.shape) < 0.5, a, b)


def init_population(actor_genes: np.ndarray, history: HistoryBuffer, W: int, n_actions: int,
                    rng: np.random.Generator, p_mut: float = 0.1) -> Population:
    if W < 2:
        raise ValueError(f"population size must be >= 2, got {W}")
    actor_genes = np.asarray(actor_genes, dtype=np.int64)
    rows = [actor_genes.copy()]
    rows += [adapt_length(e.genes, actor_genes) for e in history.top(W - 1)]
    while len(rows) < W:
        rows.append(mutate(actor_genes, p_mut, n_actions, rng))
    return Population(np.stack(rows))


@dataclass
class EvolutionResult:
    best: Individual
    population: Population
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (gen, best r_s, mean r_s)
    stopped_early: bool = False
    evaluated: list[np.ndarray] = field(default_factory=list)


def evolve(
    population: Population,
    graph: NeighborGraph,
    action_set: Sequence[float],
    iterations: int,
    delta: float,
    rng: np.random.Generator,
    p_mut: float = 0.1,
    log_prob: np.ndarray | None = None,
    keep_evaluated: bool = False,
    reward_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> EvolutionResult:
    """Crossover/mutation rounds with top-W-of-2W selection by scale consistency.

    Stops once the best individual reaches ``delta``. The winner is the
    r_s-best individual. Ties go, in order, to the higher total reward
    (``reward_fn`` maps (k, N) genes to k rewards), the higher actor
    log-probability (``log_prob`` is the (N, A) per-region log-policy) and
    the earlier individual.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0 < delta <= 1:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    actions = np.asarray(action_set, dtype=float)
    n_actions = actions.size
    pop = population.genes.copy()
    W, N = pop.shape
    fit = scale_consistency_batch(actions[pop], graph)
    trace = [(0, float(fit.max()), float(fit.mean()))]
    evaluated = [pop.copy()] if keep_evaluated else []
    stopped = False
    gen = population.generation
    for _ in range(iterations):
        first = rng.integers(W, size=W)
        second = rng.integers(W - 1, size=W)
        second = second + (second >= first)
        children = np.where(rng.random((W, N)) < 0.5, pop[first], pop[second])
        children = mutate(children, p_mut, n_actions, rng)
        child_fit = scale_consistency_batch(actions[children], graph)
        if keep_evaluated:
            evaluated.append(children.copy())
        pool = np.vstack([pop, children])
        pool_fit = np.concatenate([fit, child_fit])
        keep = np.argsort(-pool_fit, kind="stable")[:W]
        pop, fit = pool[keep], pool_fit[keep]
        gen += 1
        trace.append((gen, float(fit[0]), float(fit.mean())))
        if fit[0] >= delta:
            stopped = True
            break

    best_fit = fit.max()
    tied = np.flatnonzero(fit >= best_fit - TIE_TOL)
    if reward_fn is not None and tied.size > 1:
        total = np.asarray(reward_fn(pop[tied]), dtype=float)
        tied = tied[total >= total.max() - TIE_TOL]
    if log_prob is not None and tied.size > 1:
        lp = np.asarray(log_prob)[np.arange(N), pop[tied]].sum(axis=1)
        tied = tied[[int(np.argmax(lp))]]
    pick = tied[0]
    best = Individual(pop[pick].copy(), float(fit[pick]))
    return EvolutionResult(best, Population(pop, gen), trace, stopped, evaluated)
