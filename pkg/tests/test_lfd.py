"""
示教学习测试：损失、缓冲区、训练与评估
"""
import math

import numpy as np
import pytest

from autodiff.tensor import Tensor
from errors import EmptyDatasetError, EmptyStatsError, ShapeMismatchError, TrainingDivergenceError
from lfd.buffer import ReplayBuffer
from lfd.evaluate import evaluate_policy, policy_scores
from lfd.losses import (
    Batch,
    advantage_weighted_loss,
    advantage_weights,
    compute_critic_loss,
    compute_policy_loss,
    entropy_loss,
    estimate_value,
    policy_loss,
    td_target,
)
from lfd.networks import Policy, TanhGaussianActor, polyak_update, random_crop
from lfd.settings import LfdConfig
from lfd.trainer import default_eval_seeds, imitation_reward, train_lfd
from sim.state import ParticleState
from tasks.observations import observation_dim
from tasks.spaces import TaskId, get_task_space
from tasks.teacher import record_scripted_dataset, scripted_policy_for
from trajopt.transfer import StudentDataset

OBS_DIM = observation_dim(TaskId.THREE_BOXES, 1)
SMALL = dict(hidden_width=16, batch_size=8)


@pytest.fixture(scope="module")
def scripted_dataset():
    policy = scripted_policy_for(TaskId.THREE_BOXES, "one_picker")
    trajectories = record_scripted_dataset(TaskId.THREE_BOXES, policy, 3, seed=0, num_pickers=1)
    return StudentDataset.from_trajectories(TaskId.THREE_BOXES, 1, trajectories)


def _random_batch(size=6, seed=0, dones=None):
    rng = np.random.default_rng(seed)
    low, high = get_task_space(TaskId.THREE_BOXES).action_bounds(1)
    observations = rng.normal(size=(size, OBS_DIM))
    next_observations = rng.normal(size=(size, OBS_DIM))
    return Batch(
        observations=observations,
        actor_inputs=observations,
        actions=rng.uniform(low, high, size=(size, len(low))),
        rewards=rng.normal(size=size),
        next_observations=next_observations,
        next_actor_inputs=next_observations,
        dones=np.zeros(size) if dones is None else np.asarray(dones, dtype=np.float64),
    )


class ConstantCritic:
    def __init__(self, value):
        self.value = value

    def min_q(self, states, actions):
        return Tensor(np.full(states.shape[0], self.value))


# ============ 损失 ============

def test_zero_advantage_gives_negative_log_likelihood():
    log_prob = Tensor(np.array([-0.5, -1.5, -3.0]))
    q = np.array([1.0, 2.0, -1.0])
    loss = advantage_weighted_loss(log_prob, q, q.copy())
    assert loss.item() == pytest.approx(np.mean([0.5, 1.5, 3.0]))


def test_advantage_loss_by_hand():
    log_prob = Tensor(np.array([-1.0, -2.0]), requires_grad=True)
    loss = advantage_weighted_loss(log_prob, np.array([1.0, 0.0]), np.array([0.0, 0.0]), temperature=1.0)
    assert loss.item() == pytest.approx((math.e + 2.0) / 2.0, abs=1e-10)
    loss.backward()
    assert np.allclose(log_prob.grad, [-math.e / 2.0, -0.5], atol=1e-10)


def test_advantage_weights_are_clipped():
    weights = advantage_weights(np.array([100.0, 0.0]), np.zeros(2), temperature=1.0, clip=20.0)
    assert weights[0] == pytest.approx(math.exp(20.0))
    with pytest.raises(TrainingDivergenceError):
        advantage_weights(np.array([np.nan]), np.zeros(1))


def test_entropy_loss_without_alpha_is_negative_q():
    q = Tensor(np.array([1.0, 3.0]))
    assert entropy_loss(Tensor(np.array([-7.0, 2.0])), q, alpha=0.0).item() == pytest.approx(-2.0)
    assert entropy_loss(Tensor(np.array([-7.0, 2.0])), q, alpha=0.5).item() == pytest.approx(-3.25)


def test_policy_loss_is_linear_in_entropy_weight():
    loss_a, loss_e = Tensor(np.array(2.0)), Tensor(np.array(-4.0))
    assert policy_loss(loss_a, loss_e, 0.0).item() == pytest.approx(2.0)
    assert policy_loss(loss_a, loss_e, 1.0).item() == pytest.approx(-4.0)
    assert policy_loss(loss_a, loss_e, 0.25).item() == pytest.approx(0.5)


def test_td_target_cases():
    rewards = np.array([1.0, 2.0, -1.0])
    q1, q2 = np.array([5.0, 1.0, np.inf]), np.array([4.0, 3.0, np.inf])
    log_prob = np.array([-1.0, 0.5, 0.0])
    assert np.array_equal(td_target(rewards, np.zeros(3), np.zeros(3), np.ones(3), log_prob, 0.0, 0.2)[:2],
                          rewards[:2])
    target = td_target(rewards, np.array([0.0, 0.0, 1.0]), q1, q2, log_prob, gamma=0.9, alpha=0.5)
    assert target[0] == pytest.approx(1.0 + 0.9 * (4.0 + 0.5))
    assert target[1] == pytest.approx(2.0 + 0.9 * (1.0 - 0.25))
    assert target[2] == -1.0


def test_estimate_value_with_constant_critic():
    low, high = get_task_space(TaskId.THREE_BOXES).action_bounds(1)
    actor = TanhGaussianActor(OBS_DIM, low, high, LfdConfig(**SMALL), np.random.default_rng(0))
    observations = np.random.default_rng(1).normal(size=(4, OBS_DIM)).astype(np.float32)
    values = estimate_value(actor, ConstantCritic(2.5), observations, observations, k=3,
                            rng=np.random.default_rng(2))
    assert np.allclose(values, 2.5)
    with pytest.raises(ValueError):
        estimate_value(actor, ConstantCritic(0.0), observations, observations, k=0)


def test_critic_loss_without_discount():
    policy = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, LfdConfig(gamma=0.0, **SMALL), dtype=np.float64)
    batch = _random_batch()
    q1, q2 = policy.critic(Tensor(batch.observations), batch.actions)
    expected = np.mean((q1.data - batch.rewards) ** 2) + np.mean((q2.data - batch.rewards) ** 2)
    loss = compute_critic_loss(policy, batch, policy.config, np.random.default_rng(0))
    assert loss.item() == pytest.approx(expected, rel=1e-10)


def test_policy_loss_without_entropy_term():
    config = LfdConfig(entropy_weight=0.0, **SMALL)
    policy = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, config, dtype=np.float64)
    loss, info = compute_policy_loss(policy, _random_batch(), config, np.random.default_rng(0))
    assert loss.item() == pytest.approx(info["loss_a"])
    assert math.isnan(info["loss_e"])


# ============ 网络 ============

def test_sample_and_log_prob_agree():
    low, high = get_task_space(TaskId.THREE_BOXES).action_bounds(1)
    actor = TanhGaussianActor(OBS_DIM, low, high, LfdConfig(**SMALL), np.random.default_rng(0))
    actor.astype(np.float64)
    inputs = Tensor(np.random.default_rng(1).normal(scale=0.1, size=(3, OBS_DIM)))
    noise = np.random.default_rng(2).normal(scale=0.3, size=(3, len(low)))
    action, log_prob = actor.sample(inputs, noise=noise)
    assert np.all(action.data >= low) and np.all(action.data <= high)
    assert np.allclose(actor.log_prob(inputs, action.data).data, log_prob.data, atol=1e-6)


def test_polyak_update_limits():
    a = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, LfdConfig(**SMALL), seed=0)
    b = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, LfdConfig(**SMALL), seed=1)
    before = a.critic.state_vector()
    polyak_update(a.critic, b.critic, 0.0)
    assert np.array_equal(a.critic.state_vector(), before)
    polyak_update(a.critic, b.critic, 1.0)
    assert np.allclose(a.critic.state_vector(), b.critic.state_vector())


def test_random_crop_keeps_shape():
    images = np.random.default_rng(0).random((2, 8, 8, 3))
    assert random_crop(images, 0, np.random.default_rng(0)) is images
    cropped = random_crop(images, 2, np.random.default_rng(0))
    assert cropped.shape == images.shape


def test_policy_params_round_trip():
    policy = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, LfdConfig(**SMALL), seed=3)
    clone = Policy.from_params(policy.to_params())
    observation = np.random.default_rng(0).normal(size=OBS_DIM)
    assert np.array_equal(policy.act(observation), clone.act(observation))


# ============ 缓冲区 ============

def _tuple(value):
    return np.full(OBS_DIM, value), np.zeros(6), value, np.full(OBS_DIM, value), False


def test_buffer_evicts_online_tuples_first():
    buffer = ReplayBuffer(3, OBS_DIM, 6)
    buffer.add(*_tuple(1.0), demo=True)
    buffer.add(*_tuple(2.0), demo=True)
    buffer.add(*_tuple(3.0))
    slot = buffer.add(*_tuple(4.0))
    assert len(buffer) == 3
    assert buffer.demo_count == 2
    assert slot == 2
    assert sorted(buffer.rewards.tolist()) == [1.0, 2.0, 4.0]


def test_buffer_evicts_oldest_demo_when_full_of_demos():
    buffer = ReplayBuffer(2, OBS_DIM, 6)
    buffer.add(*_tuple(1.0), demo=True)
    buffer.add(*_tuple(2.0), demo=True)
    assert buffer.add(*_tuple(3.0), demo=True) == 0
    assert sorted(buffer.rewards.tolist()) == [2.0, 3.0]


def test_buffer_grows_past_initial_slots():
    buffer = ReplayBuffer(2000, OBS_DIM, 6)
    for i in range(1500):
        buffer.add(*_tuple(float(i)))
    assert len(buffer) == 1500
    assert buffer.rewards[1499] == 1499.0


def test_buffer_rejects_bad_tuples_and_empty_sampling():
    buffer = ReplayBuffer(4, OBS_DIM, 6)
    with pytest.raises(EmptyDatasetError):
        buffer.sample(2, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        buffer.add(np.zeros(OBS_DIM + 1), np.zeros(6), 0.0, np.zeros(OBS_DIM), False)
    with pytest.raises(ValueError):
        ReplayBuffer(0, OBS_DIM, 6)


# ============ 训练 ============

def test_imitation_reward_values():
    state = ParticleState(np.zeros((4, 3)), np.zeros((1, 3)))
    shifted = ParticleState(np.full((4, 3), 0.1 / math.sqrt(3.0)), np.zeros((1, 3)))
    assert imitation_reward(state, state, weight=2.0, sigma=0.1) == pytest.approx(2.0)
    assert imitation_reward(shifted, state, weight=1.0, sigma=0.1) == pytest.approx(math.exp(-1.0))


def test_default_eval_seeds_are_distinct():
    seeds = default_eval_seeds(0)
    assert len(seeds) == 5
    assert len(set(seeds)) == 5


def test_zero_steps_return_initialization(scripted_dataset):
    config = LfdConfig(training_steps=0, eval_rollouts=0, seed=4, **SMALL)
    result = train_lfd(scripted_dataset, config)
    initial = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, config, seed=4).to_params()
    assert np.array_equal(result.params.actor, initial.actor)
    assert np.array_equal(result.params.critic, initial.critic)
    assert result.curve == []
    assert result.buffer_size == len(scripted_dataset.transitions)


def test_training_records_curve(scripted_dataset):
    config = LfdConfig(training_steps=4, rollout_interval=2, eval_interval=2, eval_rollouts=1, **SMALL)
    result = train_lfd(scripted_dataset, config, eval_seeds=[11])
    assert [point.step for point in result.curve] == [0, 2, 4]
    assert result.episodes + result.dropped_episodes == 2
    assert result.buffer_size == 9 + 3 * result.episodes
    assert result.final_stats["n"] == 1
    assert result.params.metadata["training_steps"] == 4


def test_training_rejects_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        train_lfd(StudentDataset(TaskId.THREE_BOXES, 1))


def test_image_mode_needs_rendered_dataset(scripted_dataset):
    with pytest.raises(ShapeMismatchError):
        train_lfd(scripted_dataset, LfdConfig(observation_mode="image", training_steps=0, **SMALL))


# ============ 评估 ============

def test_policy_scores_need_rollouts():
    controller = scripted_policy_for(TaskId.THREE_BOXES, "one_picker")
    with pytest.raises(EmptyStatsError):
        policy_scores(controller, TaskId.THREE_BOXES, 0, [0], num_pickers=1)
    with pytest.raises(EmptyStatsError):
        policy_scores(controller, TaskId.THREE_BOXES, 3, [], num_pickers=1)


def test_scripted_controller_scores_near_one():
    controller = scripted_policy_for(TaskId.THREE_BOXES, "one_picker")
    stats = evaluate_policy(controller, TaskId.THREE_BOXES, 4, [0, 1], num_pickers=1)
    assert stats["n"] == 4
    assert stats["mean"] >= 0.9


def test_policy_evaluation_is_deterministic():
    policy = Policy(TaskId.THREE_BOXES, 1, OBS_DIM, LfdConfig(**SMALL), seed=0)
    first = policy_scores(policy, TaskId.THREE_BOXES, 2, [5])
    second = policy_scores(policy.to_params(), TaskId.THREE_BOXES, 2, [5])
    assert first == second
