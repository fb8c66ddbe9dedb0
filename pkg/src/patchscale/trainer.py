"""Training loop, frozen-benchmark evaluation and run artifacts.

Each step draws a fresh batch of scenes, proposes per-region scales with the
actor, refines them with the evolutionary search, scores them in the
simulated detector and stores the step. At the end of an episode the actor and
the critic each take one update per step, because the critic's target needs
the rewards of the remaining steps.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent, StepRecord, Trajectory, actor_update, critic_update, joint_log_prob
from .config import RunConfig
from .environment import Task
from .evolution import HistoryBuffer, evolve, init_population, record_best
from .exceptions import OracleCapError
from .numerics import NonFiniteError
from .oracle import exhaustive
from .scene import SIZE_BANDS, Scene, generate_scene, size_band

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("episode", "step", "r_l", "r_c", "r_s", "R")
EVOLUTION_COLUMNS = ("episode", "step", "scene", "generation", "best_rs", "mean_rs")
CHECKPOINT_FILE = "checkpoint.json"
DIAGNOSTIC_FILE = "diagnostic_checkpoint.json"


def fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


@dataclass
class RunMetrics:
    rows: list[tuple] = field(default_factory=list)
    evolution: list[tuple] = field(default_factory=list)
    wall_clock: float = 0.0

    def episode_rewards(self) -> np.ndarray:
        """Mean total reward per episode."""
        if not self.rows:
            return np.zeros(0)
        arr = np.array([(r[0], r[5]) for r in self.rows], dtype=float)
        episodes = np.unique(arr[:, 0])
        return np.array([arr[arr[:, 0] == e, 1].mean() for e in episodes])

    def write(self, out_dir: Path, trace_evolution: bool = False) -> None:
        _write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, self.rows)
        if trace_evolution:
            _write_csv(out_dir / "evolution.csv", EVOLUTION_COLUMNS, self.evolution)

    def to_json(self) -> dict:
        return {"rows": [list(r) for r in self.rows], "evolution": [list(r) for r in self.evolution]}

    @classmethod
    def from_json(cls, blob: dict) -> "RunMetrics":
        return cls([tuple(r) for r in blob["rows"]], [tuple(r) for r in blob["evolution"]])


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def cosine_lr(base: float, k: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * k / max(total, 1)))


def _episode_seeds(seed: int, episode: int, steps: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(episode), 0x5CE7E]))
    # training scene seeds live far above the frozen benchmark range
    return rng.integers(2**32, 2**62, size=(steps, batch))


@dataclass
class TrainState:
    agent: Agent
    history: HistoryBuffer
    metrics: RunMetrics
    episode: int = 0

    def save(self, path: Path, config: RunConfig) -> None:
        blob = {
            "episode": self.episode,
            "config": config.to_dict(),
            "agent": self.agent.state_dict(),
            "history": self.history.to_json(),
            "metrics": self.metrics.to_json(),
            "rng": {"scheme": "SeedSequence([seed, episode])", "seed": config.train.seed},
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(blob))
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path, config: RunConfig) -> "TrainState":
        blob = json.loads(Path(path).read_text())
        agent = Agent(config.actions.scales, config.agent_config(), config.train.seed)
        agent.load_state_dict(blob["agent"])
        return cls(agent, HistoryBuffer.from_json(blob["history"]),
                   RunMetrics.from_json(blob["metrics"]), int(blob["episode"]))


def refine(task: Task, actor_idx: np.ndarray, logp: np.ndarray, history: HistoryBuffer,
           config: RunConfig, rng: np.random.Generator):
    """Evolutionary refinement of one scene's actor assignment."""
    ev = config.evolution
    n_actions = len(config.actions.scales)
    pop = init_population(actor_idx, history, ev.population, n_actions, rng, ev.p_mut)
    return evolve(pop, task.graph, config.actions.scales, ev.iterations, ev.delta, rng,
                  ev.p_mut, log_prob=logp, reward_fn=task.table.score)


def run_step(state: TrainState, config: RunConfig, tasks: list[Task], rng: np.random.Generator,
             episode: int, step: int) -> StepRecord:
    agent = state.agent
    batch = agent.make_batch(tasks)
    idx, logp = agent.sample_actions(batch, rng)
    applied = []
    rewards = []
    components = []
    for m, (task, a_idx, lp) in enumerate(zip(tasks, batch.split(idx), batch.split(logp))):
        if config.evolution.enabled:
            res = refine(task, a_idx, lp, state.history, config, rng)
            a_idx = res.best.genes
            state.metrics.evolution.extend(
                (episode, step, m, g, b, mu) for g, b, mu in res.trace
            )
        rv = task.evaluate(task.actions[a_idx])
        applied.append(a_idx)
        rewards.append(rv.total)
        components.append((rv.r_l, rv.r_c, rv.r_s, rv.total))
    best = int(np.argmax(rewards))
    record_best(applied[best], rewards[best], state.history)
    r_l, r_c, r_s, total = np.mean(components, axis=0)
    state.metrics.rows.append((episode, step, r_l, r_c, r_s, total))
    return StepRecord(batch, np.concatenate(applied), np.asarray(rewards, dtype=float))


def train(
    config: RunConfig,
    out_dir: str | Path | None = None,
    resume: bool = True,
    trace_evolution: bool = False,
    stop_after: int | None = None,
    scenes: Sequence[Scene] | None = None,
) -> TrainState:
    """Run the episode/step loop; writes metrics and a checkpoint when ``out_dir`` is set.

    ``stop_after`` ends the run after that many episodes (as if interrupted);
    a later call with ``resume=True`` continues from the checkpoint.
    ``scenes`` replaces freshly generated training scenes with draws from a fixed pool.
    """
    config.validate()
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_FILE if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if ckpt is not None and resume and ckpt.exists():
        state = TrainState.load(ckpt, config)
        log.info("resuming from %s at episode %d", ckpt, state.episode)
    else:
        agent = Agent(config.actions.scales, config.agent_config(), config.train.seed)
        state = TrainState(agent, HistoryBuffer(config.evolution.history_capacity), RunMetrics())

    settings = config.env_settings()
    tc = config.train
    total_updates = tc.episodes * tc.steps
    done_now = 0
    while state.episode < tc.episodes:
        p = state.episode
        seeds = _episode_seeds(tc.seed, p, tc.steps, tc.batch_scenes)
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, p, 0xAC7]))
        steps = []
        for t in range(tc.steps):
            if scenes:
                batch_scenes = [scenes[int(s) % len(scenes)] for s in seeds[t]]
            else:
                batch_scenes = [generate_scene(config.scene, int(s)) for s in seeds[t]]
            tasks = [Task.from_scene(sc, settings) for sc in batch_scenes]
            steps.append(run_step(state, config, tasks, rng, p, t))
        try:
            _update(state.agent, steps, config, p, total_updates)
        except NonFiniteError:
            if out is not None:
                state.save(out / DIAGNOSTIC_FILE, config)
                state.metrics.write(out, trace_evolution)
                log.error("non-finite update in episode %d; diagnostic state in %s", p, out / DIAGNOSTIC_FILE)
            raise
        state.episode += 1
        done_now += 1
        if ckpt is not None and tc.checkpoint_every and state.episode % tc.checkpoint_every == 0:
            state.save(ckpt, config)
        if stop_after is not None and done_now >= stop_after:
            break

    state.metrics.wall_clock += time.perf_counter() - start
    if out is not None:
        state.save(ckpt, config)
        state.metrics.write(out, trace_evolution)
    return state


def _update(agent: Agent, steps: list[StepRecord], config: RunConfig, episode: int,
            total_updates: int) -> None:
    for s in steps:
        s.values = agent.values(s.batch).data.reshape(-1)
        if agent.config.mode == "ppo_clip":
            s.old_logp = joint_log_prob(agent, s).data.reshape(-1)
    traj = Trajectory(steps, config.agent.gamma)
    adv = traj.advantages()
    ret = traj.returns()
    T = len(steps)
    for t in range(T):
        k = episode * T + t
        lr = cosine_lr(config.agent.lr, k, total_updates)
        seed = None
        if config.agent.dropout > 0:
            seed = int(np.random.SeedSequence([config.train.seed, episode, t, 0xD0]).generate_state(1)[0])
        actor_update(agent, steps[t:t + 1], adv[t:t + 1], lr, seed)
        critic_update(agent, steps[t:t + 1], ret[t:t + 1], lr, seed)


# -- evaluation ------------------------------------------------------------------------


def benchmark_tasks(config: RunConfig, alpha_s: float | None = None) -> list[Task]:
    """The frozen evaluation suite: consecutive seeds from ``eval.seed_start``."""
    scfg = config.benchmark_scene_config()
    settings = config.env_settings(alpha_s)
    return [
        Task.from_scene(generate_scene(scfg, config.eval.seed_start + k), settings)
        for k in range(config.eval.n_scenes)
    ]


def oracle_rewards(tasks: Sequence[Task], cap: int) -> list[dict]:
    out = []
    for task in tasks:
        if len(task.settings.action_set) ** task.n_regions > cap:
            raise OracleCapError(
                f"scene seed {task.scene.seed}: {task.n_regions} regions exceed the oracle cap {cap}"
            )
        res = exhaustive(task, cap)
        out.append({"seed": task.scene.seed, "n_regions": task.n_regions,
                    "scales": list(res.scales), "reward": res.reward})
    return out


@dataclass
class EvalResult:
    rewards: np.ndarray
    assignments: list[np.ndarray]
    label: str

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())


def evaluate(
    agent: Agent,
    tasks: Sequence[Task],
    config: RunConfig,
    history: HistoryBuffer | None = None,
    use_evolution: bool = True,
    use_attention: bool = True,
    label: str = "full",
) -> EvalResult:
    """Greedy, noise-free scoring of a frozen agent on a list of tasks.

    The history buffer is read but never written, so evaluation has no side effects.
    """
    history = history if history is not None else HistoryBuffer(config.evolution.history_capacity)
    rewards, assignments = [], []
    for task in tasks:
        batch = agent.make_batch([task])
        if use_attention or agent.attention is None:
            idx, logp = agent.sample_actions(batch, greedy=True)
        else:
            logp = _log_probs_without_attention(agent, batch)
            idx = np.argmax(logp, axis=1)
        if use_evolution:
            rng = np.random.default_rng(np.random.SeedSequence([config.train.seed, task.scene.seed, 0xE7]))
            idx = refine(task, idx, logp, history, config, rng).best.genes
        assignments.append(task.actions[idx])
        rewards.append(task.evaluate(task.actions[idx]).total)
    return EvalResult(np.asarray(rewards), assignments, label)


def _log_probs_without_attention(agent: Agent, batch) -> np.ndarray:
    from . import numerics as nx
    from .numerics import Tensor

    return nx.log_softmax_rows(agent.policy(Tensor(batch.X))).data


def neighbor_variance(tasks: Sequence[Task], assignments: Sequence[np.ndarray]) -> float:
    """Mean over neighbor groups (a region and its neighbors) of the variance of assigned scales."""
    variances = []
    for task, lam in zip(tasks, assignments):
        for i, nb in enumerate(task.graph.neighbors):
            if nb:
                variances.append(float(np.var(lam[[i, *nb]])))
    return float(np.mean(variances)) if variances else 0.0


def size_band_histogram(tasks: Sequence[Task], assignments: Sequence[np.ndarray],
                        edges: Sequence[float], action_set: Sequence[float]) -> np.ndarray:
    """(bands, actions) counts of the scale applied to each object, by the object's size band."""
    hist = np.zeros((len(edges) - 1, len(action_set)), dtype=int)
    actions = list(action_set)
    for task, lam in zip(tasks, assignments):
        for region, s in zip(task.regions, lam):
            for obj in region.objects:
                hist[size_band(obj.px_size, edges), actions.index(float(s))] += 1
    return hist


def write_histogram(path: Path, hist: np.ndarray, action_set: Sequence[float]) -> None:
    header = ["size_band"] + [f"scale_{a:g}" for a in action_set]
    rows = [[SIZE_BANDS[b] if b < len(SIZE_BANDS) else f"band_{b}", *hist[b]] for b in range(hist.shape[0])]
    _write_csv(path, header, rows)
