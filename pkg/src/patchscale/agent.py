"""Actor-critic over discrete per-region scaling actions.

The actor maps each region's attended feature through a gated block and a
dense head to logits over the action set; regions act independently given the
shared attended state. The critic applies the same block structure to the
mean-pooled attended features of a scene and outputs one state value.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .environment import Task
from .features import encode_regions, spatial_affinity, spatial_semantic_attention
from .numerics import DenseLayer, GatedBlock, Module, NonFiniteError, Tensor


@dataclass(frozen=True)
class AgentConfig:
    mode: str = "reinforce"  # or "ppo_clip"
    feature_dim: int = 32
    gate_reduction: int = 4
    attention: bool = True
    fusion: str = "hadamard"
    qk_init: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    gamma: float = 0.99
    clip_ratio: float = 0.2
    ppo_epochs: int = 4
    encoder_seed: int = 0
    max_grad_norm: float | None = 1.0  # global norm clip per network; None disables


class Attention(Module):
    """Learnable query/key/value projections (single linear maps, no bias)."""

    def __init__(self, dim: int, rng: np.random.Generator, qk_init: float = 1.0):
        eye = np.eye(dim)
        self.theta_q = Tensor(qk_init * eye + rng.normal(0, 0.05, (dim, dim)), requires_grad=True)
        self.theta_k = Tensor(qk_init * eye + rng.normal(0, 0.05, (dim, dim)), requires_grad=True)
        self.theta_v = Tensor(eye + rng.normal(0, 0.05, (dim, dim)), requires_grad=True)


class PolicyNet(Module):
    def __init__(self, dim: int, n_actions: int, rng: np.random.Generator, reduction: int = 4):
        self.gate = GatedBlock(dim, rng, reduction)
        self.head = DenseLayer(dim, n_actions, rng)

    def __call__(self, E, p_drop: float = 0.0, rng=None) -> Tensor:
        return self.head(nx.dropout(self.gate(E), p_drop, rng))


class CriticNet(Module):
    def __init__(self, dim: int, rng: np.random.Generator, reduction: int = 4):
        self.gate = GatedBlock(dim, rng, reduction)
        self.head = DenseLayer(dim, 1, rng)

    def __call__(self, pooled, p_drop: float = 0.0, rng=None) -> Tensor:
        return self.head(nx.dropout(self.gate(pooled), p_drop, rng))


@dataclass
class Batch:
    """Several scenes stacked region-wise; attention is masked to stay within a scene."""

    X: np.ndarray
    S: np.ndarray
    mask: np.ndarray
    pool: np.ndarray  # (M, sum N) mean-pooling matrix
    sizes: tuple[int, ...]

    @classmethod
    def from_tasks(cls, tasks: Sequence[Task], dim: int, seed: int = 0) -> "Batch":
        sizes = tuple(t.n_regions for t in tasks)
        total = sum(sizes)
        X = np.zeros((total, dim))
        S = np.zeros((total, total))
        mask = np.zeros((total, total), dtype=bool)
        pool = np.zeros((len(tasks), total))
        start = 0
        for m, (task, n) in enumerate(zip(tasks, sizes)):
            sl = slice(start, start + n)
            X[sl] = encode_regions(task.regions, task.scene.bounds, dim, seed)
            S[sl, sl] = spatial_affinity(task.regions)
            mask[sl, sl] = True
            pool[m, sl] = 1.0 / n
            start += n
        return cls(X, S, mask, pool, sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        off = self.offsets
        return [flat[off[m]:off[m + 1]] for m in range(len(self.sizes))]

    @property
    def group(self) -> np.ndarray:
        """(M, sum N) 0/1 matrix summing region rows into scenes."""
        return (self.pool > 0).astype(float)


class SGD:
    """Momentum SGD with L2 weight decay; ``step`` descends on ``p.grad``."""

    def __init__(self, params: "OrderedDict[str, Tensor]", momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = p.data - lr * v

    def state_dict(self) -> dict:
        return nx.params_to_json(self.velocity)

    def load_state_dict(self, blob: dict) -> None:
        self.velocity = {k: v.copy() for k, v in nx.params_from_json(blob).items()}


def _check_grads(params: "OrderedDict[str, Tensor]", what: str) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"{what}: non-finite gradient in {name}; step aborted")


def clip_grad_norm(params: "OrderedDict[str, Tensor]", max_norm: float | None) -> float:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class Agent:
    def __init__(self, action_set: Sequence[float], config: AgentConfig = AgentConfig(),
                 seed: int = 0):
        self.action_set = tuple(float(a) for a in action_set)
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA6E7]))
        d = config.feature_dim
        self.attention = Attention(d, rng, config.qk_init) if config.attention else None
        self.policy = PolicyNet(d, len(self.action_set), rng, config.gate_reduction)
        self.critic = CriticNet(d, rng, config.gate_reduction)
        self.actor_opt = SGD(self.actor_parameters(), config.momentum, config.weight_decay)
        self.critic_opt = SGD(self.critic.parameters(), config.momentum, config.weight_decay)

    # -- parameters -------------------------------------------------------------

    def actor_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        if self.attention is not None:
            for k, v in self.attention.parameters().items():
                out[f"attention.{k}"] = v
        for k, v in self.policy.parameters().items():
            out[f"policy.{k}"] = v
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.actor_parameters().values()) + self.critic.n_parameters()

    def make_batch(self, tasks: Sequence[Task]) -> Batch:
        return Batch.from_tasks(tasks, self.config.feature_dim, self.config.encoder_seed)

    # -- forward ------------------------------------------------------------------

    def attended(self, batch: Batch, use_attention: bool = True) -> Tensor:
        X = Tensor(batch.X)
        if self.attention is None or not use_attention:
            return X
        a = self.attention
        return spatial_semantic_attention(
            X, a.theta_q, a.theta_k, a.theta_v, batch.S, self.config.fusion, batch.mask
        )

    def log_probs(self, batch: Batch, p_drop: float = 0.0, rng=None) -> Tensor:
        return nx.log_softmax_rows(self.policy(self.attended(batch), p_drop, rng))

    def values(self, batch: Batch, p_drop: float = 0.0, rng=None) -> Tensor:
        pooled = Tensor(batch.pool @ self.attended(batch).data)
        return self.critic(pooled, p_drop, rng)

    def sample_actions(self, batch: Batch, rng: np.random.Generator | None = None,
                       greedy: bool = False):
        """Action index per region plus the (sum N, A) log-probability matrix."""
        logp = self.log_probs(batch).data
        if greedy or rng is None:
            idx = np.argmax(logp, axis=1)
        else:
            probs = np.exp(logp)
            cum = np.cumsum(probs, axis=1)
            u = rng.random(logp.shape[0])[:, None] * cum[:, -1:]
            idx = np.minimum((u >= cum).sum(axis=1), logp.shape[1] - 1)
        return idx.astype(np.int64), logp

    def scales(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.action_set)[idx]

    # -- persistence ----------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "action_set": list(self.action_set),
            "actor": nx.params_to_json(self.actor_parameters()),
            "critic": nx.params_to_json(self.critic.parameters()),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
        }

    def load_state_dict(self, blob: dict) -> None:
        if tuple(blob["action_set"]) != self.action_set:
            raise ValueError(
                f"checkpoint action set {blob['action_set']} != agent action set {list(self.action_set)}"
            )
        for params, key in ((self.actor_parameters(), "actor"), (self.critic.parameters(), "critic")):
            arrays = nx.params_from_json(blob[key])
            for name, p in params.items():
                p.data = arrays[name].copy()
        self.actor_opt.load_state_dict(blob["actor_opt"])
        self.critic_opt.load_state_dict(blob["critic_opt"])


# -- trajectories ---------------------------------------------------------------------


@dataclass
class StepRecord:
    batch: Batch
    actions: np.ndarray  # (sum N,) action indices sampled from the policy
    rewards: np.ndarray  # (M,)
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (M,) V(s^t)
    old_logp: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (M,) joint log-prob


@dataclass
class Trajectory:
    steps: list[StepRecord]
    gamma: float = 0.99

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")

    def returns(self) -> np.ndarray:
        """(T, M) discounted reward-to-go from each step to the end."""
        rewards = np.stack([s.rewards for s in self.steps])
        out = np.zeros_like(rewards)
        running = np.zeros(rewards.shape[1])
        for t in range(len(self.steps) - 1, -1, -1):
            running = rewards[t] + self.gamma * running
            out[t] = running
        return out

    def advantages(self) -> np.ndarray:
        """(T, M) one-step TD advantages; the state after the last step has value 0."""
        values = np.stack([s.values for s in self.steps])
        rewards = np.stack([s.rewards for s in self.steps])
        nxt = np.vstack([values[1:], np.zeros((1, values.shape[1]))])
        return advantage(rewards, values, nxt, self.gamma)


def advantage(reward, value, next_value, gamma: float):
    """R + gamma * V(s') - V(s)."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    return np.asarray(reward, dtype=float) + gamma * np.asarray(next_value, dtype=float) - np.asarray(
        value, dtype=float
    )


def joint_log_prob(agent: Agent, step: StepRecord, p_drop: float = 0.0, rng=None) -> Tensor:
    """(M, 1) sum over each scene's regions of log pi(a_i | s)."""
    picked = nx.pick(agent.log_probs(step.batch, p_drop, rng), step.actions)
    return nx.matmul(Tensor(step.batch.group), picked)


def actor_objective(agent: Agent, steps: Sequence[StepRecord], adv: np.ndarray,
                    dropout_seed: int | None = None) -> Tensor:
    """Sum over steps of the scene-mean of log pi(a^t | s^t) * A^t (ascended by the actor)."""
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    p = agent.config.dropout if rng is not None else 0.0
    total = None
    for step, a in zip(steps, adv):
        term = nx.mean_all(nx.mul(joint_log_prob(agent, step, p, rng), Tensor(np.reshape(a, (-1, 1)))))
        total = term if total is None else nx.add(total, term)
    return total


def ppo_objective(agent: Agent, steps: Sequence[StepRecord], adv: np.ndarray,
                  dropout_seed: int | None = None) -> Tensor:
    """Clipped surrogate, averaged over scenes and summed over steps."""
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    p = agent.config.dropout if rng is not None else 0.0
    eps = agent.config.clip_ratio
    total = None
    for step, a in zip(steps, adv):
        a_col = Tensor(np.reshape(a, (-1, 1)))
        ratio = nx.exp(nx.sub(joint_log_prob(agent, step, p, rng), Tensor(step.old_logp.reshape(-1, 1))))
        surr = nx.minimum(nx.mul(ratio, a_col), nx.mul(nx.clip(ratio, 1 - eps, 1 + eps), a_col))
        term = nx.mean_all(surr)
        total = term if total is None else nx.add(total, term)
    return total


def critic_loss(agent: Agent, steps: Sequence[StepRecord], returns: np.ndarray,
                dropout_seed: int | None = None) -> Tensor:
    """Sum over steps of the scene-mean of (V(s^t) - G^t)^2, G^t the discounted reward-to-go."""
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    p = agent.config.dropout if rng is not None else 0.0
    total = None
    for step, g in zip(steps, returns):
        resid = nx.sub(agent.values(step.batch, p, rng), Tensor(np.reshape(g, (-1, 1))))
        term = nx.mean_all(nx.square(resid))
        total = term if total is None else nx.add(total, term)
    return total


def actor_update(agent: Agent, steps: Sequence[StepRecord], adv: np.ndarray, lr: float,
                 dropout_seed: int | None = None) -> float:
    """One ascent step on the policy-gradient objective; returns the objective value.

    Zero advantages everywhere carry no learning signal, so the parameters are
    left untouched (no decay or momentum either).
    """
    adv = np.asarray(adv, dtype=float)
    if not np.any(adv):
        return 0.0
    params = agent.actor_parameters()
    if agent.config.mode == "ppo_clip":
        for step in steps:
            if step.old_logp.size == 0:  # behaviour policy = current parameters
                step.old_logp = joint_log_prob(agent, step).data.reshape(-1)
        value = 0.0
        flat = adv.reshape(-1)
        norm = (adv - flat.mean()) / (flat.std() + 1e-8) if flat.size > 1 else adv
        for epoch in range(agent.config.ppo_epochs):
            seed = None if dropout_seed is None else dropout_seed + epoch
            value = _ascend(agent, params, ppo_objective(agent, steps, norm, seed), lr)
        return value
    if agent.config.mode != "reinforce":
        raise ValueError(f"unknown agent mode {agent.config.mode!r}")
    return _ascend(agent, params, actor_objective(agent, steps, adv, dropout_seed), lr)


def _ascend(agent: Agent, params, objective: Tensor, lr: float) -> float:
    for p in params.values():
        p.grad = None
    nx.backward(nx.scale(objective, -1.0))
    _check_grads(params, "actor update")
    clip_grad_norm(params, agent.config.max_grad_norm)
    agent.actor_opt.step(lr)
    return objective.item()


def critic_update(agent: Agent, steps: Sequence[StepRecord], returns: np.ndarray, lr: float,
                  dropout_seed: int | None = None) -> float:
    """One descent step on the squared value error; returns the loss before the step."""
    params = agent.critic.parameters()
    values = np.concatenate([agent.values(s.batch).data.reshape(-1) for s in steps])
    if np.array_equal(values, np.asarray(returns, dtype=float).reshape(-1)):
        return 0.0
    for p in params.values():
        p.grad = None
    loss = critic_loss(agent, steps, returns, dropout_seed)
    nx.backward(loss)
    _check_grads(params, "critic update")
    clip_grad_norm(params, agent.config.max_grad_norm)
    agent.critic_opt.step(lr)
    return loss.item()
