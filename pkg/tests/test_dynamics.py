"""
动力学模型测试
"""
import numpy as np
import pytest

from dynamics.arch import ArchConfig, ArchVariant, DynamicsTrainConfig
from dynamics.dataset import RandomDataset, generate_random_dataset
from dynamics.evaluate import evaluate_dynamics
from dynamics.model import DynamicsModel, DynamicsParams, predict_displacements, rollout_learned
from dynamics.trainer import split_episodes, train_dynamics
from errors import EmptyDatasetError, ShapeMismatchError
from sim.state import PickPlaceAction
from tasks.spaces import TaskId
from tasks.teacher import Trajectory

SMALL = dict(conv_layers=2, channels=8, recurrent_hidden=8, head_hidden=8)


@pytest.fixture(scope="module")
def random_boxes():
    return generate_random_dataset(TaskId.THREE_BOXES, k_r=30, seed=0)


def _noop_dataset(dataset: RandomDataset) -> RandomDataset:
    episodes = []
    for episode in dataset.episodes:
        s0 = episode.states[0]
        far = np.array([[1.3, 0.1, 0.05]])
        actions = [PickPlaceAction(picks=far, places=far) for _ in episode.actions]
        episodes.append(Trajectory(episode.variant, [s0] * (len(actions) + 1), actions, 1))
    return RandomDataset(dataset.task_id, dataset.num_pickers, dataset.seed, episodes)


# ============ 随机数据集 ============

def test_random_dataset_size_and_motion(random_boxes):
    assert len(random_boxes.episodes) == 10
    assert len(random_boxes) == 30
    positions, actions, displacements = random_boxes.arrays()
    assert positions.shape == (10, 3, 24, 3)
    assert actions.shape == (10, 3, 6)
    assert np.mean(np.linalg.norm(displacements, axis=-1)) > 0


def test_random_dataset_is_deterministic():
    a = generate_random_dataset(TaskId.THREE_BOXES, k_r=10, seed=3)
    b = generate_random_dataset(TaskId.THREE_BOXES, k_r=10, seed=3)
    pa, aa, _ = a.arrays()
    pb, ab, _ = b.arrays()
    assert np.array_equal(pa, pb)
    assert np.array_equal(aa, ab)


def test_random_transitions_are_flat_view(random_boxes):
    transitions = random_boxes.transitions()
    assert len(transitions) == len(random_boxes)
    first = transitions[0]
    assert np.array_equal(first.next_positions, random_boxes.episodes[0].states[1].particles)


# ============ 模型 ============

@pytest.mark.parametrize("variant", list(ArchVariant))
def test_zero_initialized_head_predicts_no_motion(variant, random_boxes):
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(variant=variant, **SMALL), 24, 1, seed=0)
    episode = random_boxes.episodes[0]
    displacement = model.predict_displacements(episode.states[:2], episode.actions[:2])
    assert displacement.shape == (24, 3)
    assert np.array_equal(displacement, np.zeros((24, 3)))


@pytest.mark.parametrize("variant", list(ArchVariant))
def test_forward_sequence_shape(variant, random_boxes):
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(variant=variant, **SMALL), 24, 1, seed=0)
    positions, actions, _ = random_boxes.arrays()
    model.network.load_vector(np.random.default_rng(0).normal(0.0, 0.1, model.network.num_parameters))
    out = model.forward_sequence(positions[:2], actions[:2])
    assert out.shape == (2, 3, 24, 3)


def test_prediction_is_pure(random_boxes):
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(**SMALL), 24, 1, seed=0)
    model.network.load_vector(np.random.default_rng(1).normal(0.0, 0.1, model.network.num_parameters))
    episode = random_boxes.episodes[1]
    first = model.predict_displacements(episode.states[:3], episode.actions)
    second = model.predict_displacements(episode.states[:3], episode.actions)
    assert np.array_equal(first, second)
    assert np.any(first != 0)


def test_history_length_must_match(random_boxes):
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(**SMALL), 24, 1)
    episode = random_boxes.episodes[0]
    with pytest.raises(ShapeMismatchError):
        model.predict_displacements(episode.states[:2], episode.actions[:1])


def test_params_round_trip(random_boxes):
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(**SMALL), 24, 1, seed=2)
    model.network.load_vector(np.random.default_rng(2).normal(0.0, 0.1, model.network.num_parameters))
    params = model.to_params()
    episode = random_boxes.episodes[0]
    expected = model.predict_displacements(episode.states[:1], episode.actions[:1])
    assert np.allclose(predict_displacements(params, episode.states[:1], episode.actions[:1]), expected)

    broken = DynamicsParams(params.arch, params.task_id, 24, 1, params.vector[:-1])
    with pytest.raises(ShapeMismatchError):
        DynamicsModel.from_params(broken)


def test_rollout_learned_lengths(random_boxes):
    params = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(**SMALL), 24, 1).to_params()
    episode = random_boxes.episodes[0]
    empty = rollout_learned(params, episode.states[0], [])
    assert len(empty) == 1 and empty[0] is episode.states[0]
    states = rollout_learned(params, episode.states[0], episode.actions)
    assert len(states) == 4
    assert states[-1].time_step == episode.states[0].time_step + 3
    assert np.allclose(states[-1].particles, episode.states[0].particles)
    with pytest.raises(ShapeMismatchError):
        rollout_learned(params, episode.states[0], list(episode.actions) + [episode.actions[0]])


def test_rollout_batch_rejects_wrong_particle_count():
    model = DynamicsModel(TaskId.THREE_BOXES, ArchConfig(**SMALL), 24, 1)
    with pytest.raises(ShapeMismatchError):
        model.rollout_batch(np.zeros((10, 3)), np.zeros((1, 3, 6)))


# ============ 训练 ============

def test_split_episodes_is_disjoint():
    train, heldout = split_episodes(20, 0.1, seed=0)
    assert len(heldout) == 2
    assert set(train.tolist()).isdisjoint(heldout.tolist())
    assert sorted(train.tolist() + heldout.tolist()) == list(range(20))


def test_training_on_noop_data_stays_at_zero(random_boxes):
    dataset = _noop_dataset(random_boxes)
    config = DynamicsTrainConfig(lr=1e-2, optimizer="adam", epochs=3, batch_size=6)
    params, report = train_dynamics(dataset, ArchConfig(**SMALL), config, seed=0)
    episode = dataset.episodes[0]
    displacement = predict_displacements(params, episode.states[:1], episode.actions[:1])
    assert np.max(np.abs(displacement)) <= 1e-6
    assert report.final_fit_loss <= 1e-10


def test_training_reduces_loss(random_boxes):
    config = DynamicsTrainConfig(lr=1e-2, optimizer="adam", epochs=200, batch_size=9)
    params, report = train_dynamics(random_boxes, ArchConfig(**SMALL), config, seed=0)
    assert len(report.epochs) == 200
    assert report.final_fit_loss < 0.5 * report.initial_train_loss
    assert params.metadata["epochs"] == 200


def test_training_rejects_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        train_dynamics(RandomDataset(TaskId.THREE_BOXES, 1, 0, []))


def test_evaluation_on_training_set_matches_fit_loss(random_boxes):
    config = DynamicsTrainConfig(lr=1e-2, optimizer="adam", epochs=5, batch_size=9)
    params, report = train_dynamics(random_boxes, ArchConfig(**SMALL), config, seed=0)
    train = [random_boxes.episodes[i] for i in report.train_episodes]
    metrics = evaluate_dynamics(params, train, measure_speed=False)
    assert metrics["mse"] == pytest.approx(report.final_fit_loss, rel=1e-4)
    assert metrics["zero_baseline_mse"] > 0
    assert set(metrics["chamfer_ratio"]) == {"mean", "std", "n"}
    assert "speedup" not in metrics


@pytest.mark.slow
def test_desk_boxes_dynamics_beats_zero_predictor():
    dataset = generate_random_dataset(TaskId.THREE_BOXES, k_r=2000, seed=0)
    config = DynamicsTrainConfig(lr=1e-3, optimizer="adam", epochs=30, batch_size=32)
    params, report = train_dynamics(dataset, ArchConfig(), config, seed=0)
    assert report.final_heldout_loss <= 0.5 * report.zero_baseline_loss
    heldout = [dataset.episodes[i] for i in report.heldout_episodes]
    metrics = evaluate_dynamics(params, heldout)
    assert metrics["mse"] < metrics["zero_baseline_mse"]
