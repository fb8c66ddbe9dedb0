from dataclasses import replace

import numpy as np
import pytest

from patchscale import numerics as nx
from patchscale.agent import (
    Agent,
    AgentConfig,
    StepRecord,
    Trajectory,
    actor_objective,
    actor_update,
    advantage,
    clip_grad_norm,
    critic_loss,
    critic_update,
    joint_log_prob,
    ppo_objective,
)
from patchscale.environment import EnvSettings, Task
from patchscale.numerics import NonFiniteError, Tensor, finite_diff_check
from patchscale.oracle import sweep_single
from patchscale.rewards import RewardWeights
from patchscale.scene import SceneConfig, generate_scene

ACTIONS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
SMALL = AgentConfig(feature_dim=8, gate_reduction=2, dropout=0.0, max_grad_norm=None)


def _tasks(seeds, settings=EnvSettings()):
    return [Task.from_scene(generate_scene(SceneConfig(), s), settings) for s in seeds]


def _step(agent, tasks, rng, rewards=None):
    batch = agent.make_batch(tasks)
    idx, _ = agent.sample_actions(batch, rng)
    r = np.asarray(rewards if rewards is not None else rng.normal(size=len(tasks)), dtype=float)
    step = StepRecord(batch, idx, r, agent.values(batch).data.reshape(-1))
    step.old_logp = joint_log_prob(agent, step).data.reshape(-1)
    return step


def _snapshot(agent):
    params = list(agent.actor_parameters().values()) + list(agent.critic.parameters().values())
    return [p.data.copy() for p in params]


# -- policy ------------------------------------------------------------------------


def test_uniform_probs_with_zero_head():
    agent = Agent(ACTIONS, SMALL)
    agent.policy.head.weight.data[:] = 0.0
    agent.policy.head.bias.data[:] = 0.0
    logp = agent.log_probs(agent.make_batch(_tasks([0]))).data
    np.testing.assert_allclose(np.exp(logp), 1 / 6, atol=1e-15)


def test_dominant_logit():
    agent = Agent(ACTIONS, SMALL)
    agent.policy.head.weight.data[:] = 0.0
    agent.policy.head.bias.data[:] = 0.0
    agent.policy.head.bias.data[0, 3] = 50.0
    batch = agent.make_batch(_tasks([0]))
    assert np.all(np.exp(agent.log_probs(batch).data[:, 3]) > 1 - 1e-6)
    idx, _ = agent.sample_actions(batch, np.random.default_rng(0))
    assert np.all(idx == 3)


def test_sampling_reproducible_and_valid():
    agent = Agent(ACTIONS, SMALL, seed=4)
    batch = agent.make_batch(_tasks(range(3)))
    a, logp = agent.sample_actions(batch, np.random.default_rng(9))
    b, _ = agent.sample_actions(batch, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    probs = np.exp(logp)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    greedy, _ = agent.sample_actions(batch, greedy=True)
    np.testing.assert_array_equal(greedy, np.argmax(logp, axis=1))
    assert set(agent.scales(a).tolist()) <= set(ACTIONS)


def test_attention_mask_keeps_scenes_apart():
    agent = Agent(ACTIONS, SMALL)
    t = _tasks([0, 1])
    joint = agent.log_probs(agent.make_batch(t)).data
    alone = np.vstack([agent.log_probs(agent.make_batch([x])).data for x in t])
    np.testing.assert_allclose(joint, alone, atol=1e-12)


# -- advantage / returns -------------------------------------------------------------


def test_advantage_examples():
    assert advantage(1.0, 0.0, 0.0, 0.99) == 1.0
    assert abs(advantage(0.0, 0.9, 1.0, 0.9)) < 1e-15
    with pytest.raises(ValueError):
        advantage(1.0, 0.0, 0.0, 0.0)


def test_three_step_trajectory_by_hand():
    steps = [StepRecord(None, np.zeros(0), np.array([r]), np.array([v]))
             for r, v in ((1.0, 0.5), (2.0, 1.0), (0.5, 2.0))]
    traj = Trajectory(steps, gamma=0.5)
    # A_t = R_t + 0.5 V_{t+1} - V_t with V_4 = 0
    np.testing.assert_allclose(traj.advantages()[:, 0], [1.0, 2.0, -1.5], atol=1e-15)
    # G_3 = 0.5, G_2 = 2 + 0.25, G_1 = 1 + 1.125
    np.testing.assert_allclose(traj.returns()[:, 0], [2.125, 2.25, 0.5], atol=1e-15)


def test_trajectory_gamma_check():
    with pytest.raises(ValueError):
        Trajectory([], gamma=1.5)


# -- actor ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["reinforce", "ppo_clip"])
def test_zero_advantage_is_noop(mode):
    agent = Agent(ACTIONS, replace(SMALL, mode=mode))
    step = _step(agent, _tasks([0, 1]), np.random.default_rng(0))
    before = _snapshot(agent)
    assert actor_update(agent, [step], np.zeros((1, 2)), 0.1) == 0.0
    for x, y in zip(before, _snapshot(agent)):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("mode", ["reinforce", "ppo_clip"])
def test_positive_advantage_raises_log_prob(mode):
    for seed in range(5):
        agent = Agent(ACTIONS, replace(SMALL, mode=mode), seed=seed)
        step = _step(agent, _tasks([seed]), np.random.default_rng(seed))
        before = joint_log_prob(agent, step).item()
        actor_update(agent, [step], np.ones((1, 1)), 0.01)
        assert joint_log_prob(agent, step).item() > before


@pytest.mark.parametrize("seed", range(3))
def test_actor_objective_fd(seed):
    agent = Agent(ACTIONS, SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    steps = [_step(agent, _tasks([seed, seed + 10]), rng) for _ in range(2)]
    adv = rng.normal(size=(2, 2))
    params = list(agent.actor_parameters().values())
    assert finite_diff_check(lambda: actor_objective(agent, steps, adv), params) < 1e-4


def test_actor_objective_fd_with_dropout():
    agent = Agent(ACTIONS, replace(SMALL, dropout=0.5), seed=2)
    rng = np.random.default_rng(2)
    steps = [_step(agent, _tasks([3]), rng)]
    adv = np.array([[0.7]])
    params = list(agent.actor_parameters().values())
    assert finite_diff_check(lambda: actor_objective(agent, steps, adv, dropout_seed=5), params) < 1e-4


def test_ppo_objective_fd():
    agent = Agent(ACTIONS, replace(SMALL, mode="ppo_clip"), seed=1)
    rng = np.random.default_rng(1)
    steps = [_step(agent, _tasks([1, 2]), rng)]
    # move away from ratio 1 but stay inside the clip band
    for s in steps:
        s.old_logp = s.old_logp + 0.05
    adv = np.array([[1.0, -0.5]])
    params = list(agent.actor_parameters().values())
    assert finite_diff_check(lambda: ppo_objective(agent, steps, adv), params) < 1e-4


def test_unknown_mode():
    agent = Agent(ACTIONS, replace(SMALL, mode="a2c"))
    step = _step(agent, _tasks([0]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        actor_update(agent, [step], np.ones((1, 1)), 0.1)


def test_nonfinite_gradient_aborts_step():
    agent = Agent(ACTIONS, SMALL)
    step = _step(agent, _tasks([0]), np.random.default_rng(0))
    before = _snapshot(agent)
    with pytest.raises(NonFiniteError):
        actor_update(agent, [step], np.array([[np.inf]]), 0.1)
    for x, y in zip(before, _snapshot(agent)):
        np.testing.assert_array_equal(x, y)


def test_clip_grad_norm():
    params = {"a": Tensor(np.zeros(2), requires_grad=True), "b": Tensor(np.zeros(1), requires_grad=True)}
    params["a"].grad = np.array([3.0, 0.0])
    params["b"].grad = np.array([4.0])
    assert clip_grad_norm(params, 1.0) == 5.0
    np.testing.assert_allclose(params["a"].grad, [0.6, 0.0])
    np.testing.assert_allclose(params["b"].grad, [0.8])
    clip_grad_norm(params, None)
    np.testing.assert_allclose(params["b"].grad, [0.8])


# -- critic --------------------------------------------------------------------------


def test_critic_zero_residual_is_noop():
    agent = Agent(ACTIONS, SMALL)
    step = _step(agent, _tasks([0]), np.random.default_rng(0))
    before = _snapshot(agent)
    assert critic_update(agent, [step], step.values.reshape(1, -1), 0.1) == 0.0
    for x, y in zip(before, _snapshot(agent)):
        np.testing.assert_array_equal(x, y)


def test_critic_moves_value_toward_return():
    for seed in range(5):
        agent = Agent(ACTIONS, SMALL, seed=seed)
        agent.critic.head.weight.data[:] = 0.0
        agent.critic.head.bias.data[:] = 0.0
        step = _step(agent, _tasks([seed]), np.random.default_rng(seed), rewards=[1.0])
        assert agent.values(step.batch).item() == 0.0
        critic_update(agent, [step], np.array([[1.0]]), 0.01)
        assert agent.values(step.batch).item() > 0.0


@pytest.mark.parametrize("seed", range(3))
def test_critic_loss_fd(seed):
    agent = Agent(ACTIONS, SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    steps = [_step(agent, _tasks([seed, seed + 5]), rng) for _ in range(2)]
    ret = rng.normal(size=(2, 2))
    params = list(agent.critic.parameters().values())
    assert finite_diff_check(lambda: critic_loss(agent, steps, ret), params) < 1e-4


def test_critic_loss_non_increasing():
    ok = 0
    for seed in range(20):
        agent = Agent(ACTIONS, replace(SMALL, momentum=0.0, weight_decay=0.0), seed=seed)
        rng = np.random.default_rng(seed)
        steps = [_step(agent, _tasks([seed, seed + 7]), rng) for _ in range(3)]
        ret = Trajectory(steps, 0.9).returns()
        losses = [critic_loss(agent, steps, ret).item()]
        for _ in range(10):
            critic_update(agent, steps, ret, 1e-3)
            losses.append(critic_loss(agent, steps, ret).item())
        ok += all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert ok >= 19


def test_bandit_converges_to_single_region_oracle():
    # clipped-surrogate mode: its per-batch advantage centring removes the lag of
    # the learned baseline, which otherwise locks onto the first good arm sampled
    settings = EnvSettings(weights=RewardWeights(1.0, 1.0, 0.0))
    cfg = replace(SceneConfig(), min_objects=1, max_objects=1)
    hits = 0
    for seed in range(10):
        task = Task.from_scene(generate_scene(cfg, seed), settings)
        target = sweep_single(task).action_idx[0]
        agent = Agent(ACTIONS, replace(SMALL, mode="ppo_clip"), seed=seed)
        batch = agent.make_batch([task] * 4)
        rng = np.random.default_rng(seed)
        for _ in range(500):
            idx, _ = agent.sample_actions(batch, rng)
            step = StepRecord(batch, idx, task.table.score(idx[:, None]),
                              agent.values(batch).data.reshape(-1))
            traj = Trajectory([step], gamma=0.99)
            actor_update(agent, [step], traj.advantages(), agent.config.lr)
            critic_update(agent, [step], traj.returns(), agent.config.lr)
        hits += int(agent.sample_actions(agent.make_batch([task]), greedy=True)[0][0] == target)
    assert hits >= 9


# -- persistence ---------------------------------------------------------------------


def test_state_dict_roundtrip_and_mismatch():
    a = Agent(ACTIONS, SMALL, seed=1)
    step = _step(a, _tasks([0]), np.random.default_rng(0))
    actor_update(a, [step], np.ones((1, 1)), 0.1)
    b = Agent(ACTIONS, SMALL, seed=2)
    b.load_state_dict(a.state_dict())
    for x, y in zip(_snapshot(a), _snapshot(b)):
        np.testing.assert_array_equal(x, y)
    for k, v in a.actor_opt.velocity.items():
        np.testing.assert_array_equal(v, b.actor_opt.velocity[k])
    with pytest.raises(ValueError, match="action set"):
        Agent((1.0, 2.0), SMALL).load_state_dict(a.state_dict())


def test_parameter_budget():
    assert Agent(ACTIONS).n_parameters() <= 10_000
