"""
轨迹优化与跨形态迁移测试
"""
import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from errors import OptimizerError, ShapeMismatchError, SimulationDivergenceError
from sim.settings import SimConfig
from tasks.spaces import TaskId, get_task_space
from tasks.teacher import record_teacher_dataset
from trajopt.optimizers import (
    CmaEsSampler,
    GaussianDistribution,
    OptimizerConfig,
    OptimizerMethod,
    cem_iterate,
    elite_count,
    mppi_update,
    optimize_sequence,
    sample_candidates,
)
from trajopt import transfer
from trajopt.presets import CemPresets, PresetScale, QuickOptimizer
from trajopt.transfer import (
    batch_goal_costs,
    build_student_dataset,
    goal_cost,
    optimize_actions,
)

PICK_RADIUS = SimConfig().pick_radius


class AnalyticBoxes:
    """ThreeBoxes 单执行器的解析动力学：抓住最近角点所在的箱子整体平移后落地"""

    num_particles = 24
    num_pickers = 1

    def rollout_batch(self, positions0, action_sequences):
        sequences = np.asarray(action_sequences, dtype=np.float64)
        batch, steps = sequences.shape[:2]
        current = np.array(np.broadcast_to(positions0, (batch, 24, 3)))
        owner = np.arange(24) // 8
        rows = np.arange(batch)
        out = [current.copy()]
        for t in range(steps):
            pick, place = sequences[:, t, :3], sequences[:, t, 3:]
            distance = np.linalg.norm(current - pick[:, None, :], axis=-1)
            nearest = np.argmin(distance, axis=1)
            grabbed = distance[rows, nearest] <= PICK_RADIUS
            delta = (place - pick) * grabbed[:, None]
            mask = owner[None, :] == owner[nearest][:, None]
            current = current + mask[:, :, None] * delta[:, None, :]
            drop = current[:, :, 1].reshape(batch, 3, 8).min(axis=2)
            current[:, :, 1] -= np.repeat(drop, 8, axis=1)
            out.append(current.copy())
        return np.stack(out, axis=1)


def _sphere(center):
    center = np.asarray(center)
    return lambda candidates: np.sum((candidates - center) ** 2, axis=1)


# ============ 代价 ============

def test_goal_cost_values():
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert goal_cost(a, a) == 0.0
    b = np.zeros((1, 3))
    assert goal_cost(b + np.array([3.0, 4.0, 0.0]), b) == pytest.approx(5.0)
    c = np.random.default_rng(1).normal(size=(5, 3))
    assert goal_cost(a, c) == pytest.approx(np.sqrt(sum((x - y) ** 2 for x, y in zip(a.ravel(), c.ravel()))))
    with pytest.raises(ShapeMismatchError):
        goal_cost(a, c[:4])


def test_batch_goal_costs_with_intermediate_states():
    goal = np.zeros((2, 3))
    rollouts = np.zeros((1, 3, 2, 3))
    rollouts[0, 1, 0, 0] = 2.0
    rollouts[0, 2, 0, 0] = 1.0
    reference = np.zeros((3, 2, 3))
    assert batch_goal_costs(rollouts, goal)[0] == pytest.approx(1.0)
    assert batch_goal_costs(rollouts, goal, reference, intermediate_weight=0.5)[0] == pytest.approx(2.0)


# ============ 更新规则 ============

def test_elite_count_ten_percent():
    assert elite_count(50, 0.10) == 5
    assert elite_count(5, 0.10) == 1


def test_cem_degenerate_population():
    point = np.array([0.3, -0.2])
    distribution = GaussianDistribution(mean=point.copy(), std=np.array([0.5, 0.5]))
    candidates = np.tile(point, (20, 1))
    updated = cem_iterate(distribution, candidates, np.arange(20.0), 0.1, std_floor=1e-3)
    assert np.allclose(updated.mean, point)
    assert np.allclose(updated.std, 1e-3)


def test_cem_moves_toward_optimum():
    low, high = np.array([-5.0]), np.array([5.0])
    distribution = GaussianDistribution.from_bounds(low, high)
    cost = _sphere([2.0])
    distances = [abs(distribution.mean[0] - 2.0)]
    for iteration in range(5):
        candidates = sample_candidates(distribution, 50, low, high, 0, iteration)
        distribution = cem_iterate(distribution, candidates, cost(candidates), 0.1)
        distances.append(abs(distribution.mean[0] - 2.0))
    assert distances[1] < distances[0]
    assert distances[2] < distances[0]
    assert distances[-1] < 0.1


def test_mppi_temperature_limits():
    distribution = GaussianDistribution(mean=np.zeros(2), std=np.ones(2))
    candidates = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    costs = np.array([5.0, 0.0, 7.0])
    hot = mppi_update(distribution, candidates, costs, temperature=1e9)
    assert np.allclose(hot.mean, candidates.mean(axis=0), atol=1e-6)
    cold = mppi_update(distribution, candidates, costs, temperature=1e-9)
    assert np.allclose(cold.mean, candidates[1])
    assert np.array_equal(cold.std, distribution.std)


def test_all_nan_costs_raise():
    distribution = GaussianDistribution(mean=np.zeros(1), std=np.ones(1))
    with pytest.raises(OptimizerError):
        cem_iterate(distribution, np.zeros((4, 1)), np.full(4, np.nan))


def test_nan_costs_are_ranked_last():
    distribution = GaussianDistribution(mean=np.zeros(1), std=np.ones(1))
    candidates = np.array([[0.0], [1.0], [2.0]])
    updated = cem_iterate(distribution, candidates, np.array([np.nan, 1.0, 2.0]), elite_fraction=0.34)
    assert updated.mean[0] == pytest.approx(1.0)


# ============ 优化循环 ============

def test_cem_sphere():
    config = OptimizerConfig(method="cem", planning_horizon=1, iterations=10, env_interactions=1000)
    result = optimize_sequence(_sphere([0.3, -0.4]), np.array([-1.0, -1.0]), np.array([1.0, 1.0]), config,
                               population=50)
    assert result.evaluations == 500
    assert result.best_cost < 1e-3
    assert all(b <= a for a, b in zip(result.history, result.history[1:]))


def test_cma_es_sphere():
    config = OptimizerConfig(method="cma_es", planning_horizon=1, iterations=20, env_interactions=1000, seed=1)
    low, high = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    quick = optimize_sequence(_sphere([0.3, -0.4]), low, high, config, population=10)
    assert quick.evaluations == 200
    assert quick.best_cost < 1e-3
    longer = optimize_sequence(_sphere([0.3, -0.4]), low, high,
                               config.model_copy(update={"iterations": 40}), population=10)
    assert longer.best_cost < 1e-6


def test_cma_es_needs_two_candidates():
    config = OptimizerConfig(method="cma_es", planning_horizon=1, iterations=1, env_interactions=10)
    with pytest.raises(OptimizerError):
        CmaEsSampler(config, np.zeros(2), np.ones(2), 1)


def test_random_search_respects_bounds():
    config = OptimizerConfig(method="random", planning_horizon=1, iterations=3, env_interactions=100)
    seen = []

    def cost(candidates):
        seen.append(candidates)
        return np.zeros(len(candidates))

    optimize_sequence(cost, np.array([0.0, 1.0]), np.array([0.5, 2.0]), config, population=30)
    stacked = np.concatenate(seen)
    assert np.all(stacked >= [0.0, 1.0]) and np.all(stacked <= [0.5, 2.0])


def test_parallel_evaluation_matches_serial():
    base = OptimizerConfig(method="cem", planning_horizon=1, iterations=3, env_interactions=300)
    low, high = -np.ones(3), np.ones(3)
    serial = optimize_sequence(_sphere([0.1, 0.2, 0.3]), low, high, base, population=40)
    parallel = optimize_sequence(_sphere([0.1, 0.2, 0.3]), low, high,
                                 base.model_copy(update={"workers": 4}), population=40)
    assert np.array_equal(serial.best, parallel.best)


def test_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig(planning_horizon=5)
    with pytest.raises(ValidationError):
        OptimizerConfig(elite_fraction=0.0)
    assert OptimizerConfig(method="mppi").method is OptimizerMethod.MPPI


def test_population_splits_budget_across_rounds():
    config = OptimizerConfig(planning_horizon=2, iterations=2, env_interactions=2100, receding=True)
    assert config.commits == 2
    assert config.population == 2100 // 2 // 4
    assert OptimizerConfig(planning_horizon=2, iterations=2, env_interactions=2100, receding=False).population == 525


# ============ 预设 ============

def test_presets_for_task():
    full = CemPresets.for_task(TaskId.DRY_CLOTH)
    assert (full.planning_horizon, full.iterations, full.env_interactions) == (2, 2, 21000)
    desk = CemPresets.for_task(TaskId.THREE_BOXES, PresetScale.DESK)
    assert desk.planning_horizon == 3
    assert desk.env_interactions == 2100
    assert CemPresets.for_task("ClothFold", row=6, seed=4).seed == 4
    with pytest.raises(ValueError):
        CemPresets.get_row(99)


def test_quick_optimizer_keeps_budget():
    base = CemPresets.for_task(TaskId.DRY_CLOTH, PresetScale.DESK)
    variants = QuickOptimizer.variants(base)
    assert list(variants) == ["random", "cma_es", "mppi", "cem"]
    assert {v.env_interactions for v in variants.values()} == {base.env_interactions}
    assert variants["cma_es"].method is OptimizerMethod.CMA_ES


# ============ 间接轨迹优化 ============

@pytest.fixture
def one_picker_start(boxes_sim, line_variant):
    return boxes_sim.reset(line_variant, num_pickers=1)


def test_trivial_goal_costs_nothing(one_picker_start):
    config = OptimizerConfig(planning_horizon=1, iterations=2, env_interactions=200, receding=False)
    result = optimize_actions(one_picker_start, one_picker_start, AnalyticBoxes(), config)
    assert result.predicted_cost == pytest.approx(0.0, abs=1e-12)
    assert len(result.actions) == 1


def test_cem_matches_grid_search(one_picker_start):
    model = AnalyticBoxes()
    space = get_task_space(TaskId.THREE_BOXES)
    start = one_picker_start.particles
    goal = start.copy()
    goal[:8, 0] += 0.95 - start[:8, 0].mean()

    pick = start[:8].mean(axis=0)
    axes = [np.linspace(lo, hi, 10) for lo, hi in zip(space.action_low, space.action_high)]
    grid = np.array([np.concatenate([pick, place]) for place in itertools.product(*axes)])
    rollouts = model.rollout_batch(start, grid[:, None, :])
    grid_best = batch_goal_costs(rollouts, goal).min()

    config = OptimizerConfig(method="cem", planning_horizon=1, iterations=5, env_interactions=10000,
                             elite_fraction=0.01, receding=False)
    result = optimize_actions(one_picker_start, goal, model, config)
    assert result.predicted_cost <= 1.1 * grid_best


def test_optimize_actions_history_and_budget(one_picker_start, line_variant):
    goal = one_picker_start.particles.copy()
    goal[:8, 0] += 0.3
    config = OptimizerConfig(planning_horizon=2, iterations=3, env_interactions=1200, receding=True)
    result = optimize_actions(one_picker_start, goal, AnalyticBoxes(), config)
    assert len(result.actions) == 2
    assert result.interactions <= config.env_interactions
    assert all(b <= a for a, b in zip(result.cost_history, result.cost_history[1:]))
    low, high = get_task_space(TaskId.THREE_BOXES).action_bounds(1)
    for action in result.actions:
        assert np.all(action.to_vector() >= low) and np.all(action.to_vector() <= high)


def test_optimize_actions_is_deterministic(one_picker_start):
    goal = one_picker_start.particles.copy()
    goal[8:16, 0] += 0.2
    config = OptimizerConfig(planning_horizon=2, iterations=2, env_interactions=400, seed=7)
    first = optimize_actions(one_picker_start, goal, AnalyticBoxes(), config)
    second = optimize_actions(one_picker_start, goal, AnalyticBoxes(), config)
    assert first.predicted_cost == second.predicted_cost
    assert all(np.array_equal(a.to_vector(), b.to_vector()) for a, b in zip(first.actions, second.actions))


def test_optimize_actions_rejects_wrong_shapes(one_picker_start):
    with pytest.raises(ShapeMismatchError):
        optimize_actions(one_picker_start, np.zeros((10, 3)), AnalyticBoxes())


# ============ 学生数据集 ============

@pytest.fixture(scope="module")
def teacher_demos():
    return record_teacher_dataset(TaskId.THREE_BOXES, k_t=3, seed=0)


def test_empty_demos_give_empty_dataset():
    dataset = build_student_dataset([], AnalyticBoxes(), task_id=TaskId.THREE_BOXES)
    assert len(dataset) == 0
    assert dataset.transitions is None
    assert dataset.performance_stats()["n"] == 0


def test_same_morphology_replays_teacher(teacher_demos):
    dataset = build_student_dataset(teacher_demos, None, num_pickers=3)
    assert len(dataset) == 3
    for trajectory, demo in zip(dataset.trajectories, teacher_demos):
        assert trajectory.normalized_performance == pytest.approx(demo.normalized_performance)
        assert trajectory.morphology == 3


def test_optimized_student_dataset_shapes(teacher_demos):
    config = OptimizerConfig(planning_horizon=3, iterations=2, env_interactions=1800)
    dataset = build_student_dataset(teacher_demos, AnalyticBoxes(), cfg=config)
    assert len(dataset) + dataset.dropped == 3
    assert len(dataset.attempted_scores) == 3
    assert all(score >= 0 for score in dataset.performances)
    if len(dataset):
        assert len(dataset.transitions) == 3 * len(dataset)
        assert dataset.transitions.actions.shape[1] == 6


def test_divergent_replay_is_dropped(teacher_demos, monkeypatch):
    replayed = []
    true_replay = transfer.replay

    def diverge_first(simulator, s0, actions):
        replayed.append(len(actions))
        if len(replayed) == 1:
            raise SimulationDivergenceError("Non-finite velocity at settle step 0")
        return true_replay(simulator, s0, actions)

    monkeypatch.setattr(transfer, "replay", diverge_first)
    config = OptimizerConfig(planning_horizon=3, iterations=2, env_interactions=1800)
    dataset = build_student_dataset(teacher_demos, AnalyticBoxes(), cfg=config)
    assert replayed == [3, 3, 3]
    assert dataset.dropped >= 1
    assert dataset.attempted_scores[0] == 0.0
    assert len(dataset.attempted_scores) == 3
    assert len(dataset) + dataset.dropped == 3


@pytest.mark.slow
def test_three_boxes_transfer_quality():
    demos = record_teacher_dataset(TaskId.THREE_BOXES, k_t=20, seed=0)
    config = OptimizerConfig(planning_horizon=3, iterations=5, env_interactions=90000, elite_fraction=0.02)
    dataset = build_student_dataset(demos, AnalyticBoxes(), cfg=config)
    assert np.mean(dataset.attempted_scores) >= 0.9
