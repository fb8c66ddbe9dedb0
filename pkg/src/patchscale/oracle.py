"""Brute-force and coordinate-ascent maximizers of the total reward over assignments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import Task
from .exceptions import OracleCapError

DEFAULT_CAP = 6**8
CHUNK = 1 << 17


@dataclass(frozen=True)
class OracleResult:
    action_idx: tuple[int, ...]
    scales: tuple[float, ...]
    reward: float
    mode: str
    evaluations: int
    iterations: int = 0


def _enumerate_chunk(start: int, stop: int, n: int, a: int) -> np.ndarray:
    """Rows ``start..stop`` of the lexicographic product ``range(a) ** n``."""
    codes = np.arange(start, stop, dtype=np.int64)
    out = np.empty((codes.size, n), dtype=np.int64)
    for pos in range(n - 1, -1, -1):
        out[:, pos] = codes % a
        codes //= a
    return out


def exhaustive(task: Task, cap: int = DEFAULT_CAP) -> OracleResult:
    n, a = task.n_regions, len(task.settings.action_set)
    total = a**n
    if total > cap:
        raise OracleCapError(
            f"exhaustive search over {a}^{n} = {total} assignments exceeds the cap of {cap}"
        )
    table = task.table
    best_val, best_code = -np.inf, 0
    for start in range(0, total, CHUNK):
        stop = min(total, start + CHUNK)
        scores = table.score(_enumerate_chunk(start, stop, n, a))
        k = int(np.argmax(scores))  # first maximum = smallest lexicographic index
        if scores[k] > best_val:
            best_val, best_code = float(scores[k]), start + k
    idx = tuple(int(v) for v in _enumerate_chunk(best_code, best_code + 1, n, a)[0])
    return OracleResult(idx, tuple(task.settings.action_set[i] for i in idx), best_val,
                        "exhaustive", total)


def coordinate_ascent(task: Task, max_iter: int = 100) -> OracleResult:
    """Sweep regions in order, moving each to its best action given the rest."""
    n, a = task.n_regions, len(task.settings.action_set)
    table = task.table
    current = np.zeros(n, dtype=np.int64)
    for i in range(n):
        current[i] = int(np.argmax(table.iou_sum[i] + table.n_correct[i]))
    value = float(table.score(current)[0])
    evals, it = 1, 0
    for it in range(1, max_iter + 1):
        changed = False
        for i in range(n):
            cands = np.repeat(current[None, :], a, axis=0)
            cands[:, i] = np.arange(a)
            scores = table.score(cands)
            evals += a
            k = int(np.argmax(scores))
            if scores[k] > value + 1e-12:
                current, value, changed = cands[k], float(scores[k]), True
        if not changed:
            break
    idx = tuple(int(v) for v in current)
    return OracleResult(idx, tuple(task.settings.action_set[i] for i in idx), value,
                        "coordinate", evals, it)


def oracle_scales(task: Task, mode: str = "exhaustive", cap: int = DEFAULT_CAP) -> OracleResult:
    if mode == "exhaustive":
        return exhaustive(task, cap)
    if mode == "coordinate":
        return coordinate_ascent(task)
    raise ValueError(f"unknown oracle mode {mode!r}")


def sweep_single(task: Task) -> OracleResult:
    """Per-action sweep for a one-region task through the direct evaluation path."""
    if task.n_regions != 1:
        raise ValueError("sweep_single needs exactly one region")
    vals = [task.evaluate([s]).total for s in task.settings.action_set]
    k = int(np.argmax(vals))
    return OracleResult((k,), (task.settings.action_set[k],), float(vals[k]), "sweep", len(vals))
