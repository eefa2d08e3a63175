"""
跨形态迁移
在学习到的动力学上做间接轨迹优化，把教师演示（只有状态）转成学生形态的动作序列，
再用真实仿真器回放生成学生数据集
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Union

import numpy as np

from dynamics.model import DynamicsModel, DynamicsParams
from errors import (DegenerateVariantError, MorphologyMismatchError, ShapeMismatchError,
                    SimulationDivergenceError, TaskStateMismatchError)
from progress_manager import progress_manager
from sim.engine import ParticleSimulator
from sim.scene import picker_park_position
from sim.settings import SimConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.metrics import normalized_performance
from tasks.observations import TransitionBatch, trajectory_tuples
from tasks.spaces import TaskId, get_task_space, parse_task_id
from tasks.teacher import TeacherDemo, Trajectory, greedy_box_action, one_picker_policy, teacher_policy
from trajopt.optimizers import OptimizerConfig, optimize_sequence
from utils.stats import summary_stats

logger = logging.getLogger(__name__)


class RolloutModel(Protocol):
    """批量开环预测接口（DynamicsModel 或测试用的解析模型）"""

    num_particles: int
    num_pickers: int

    def rollout_batch(self, positions0: np.ndarray, action_sequences: np.ndarray) -> np.ndarray:
        ...


def _as_model(dynamics: Union[DynamicsParams, RolloutModel]) -> RolloutModel:
    if isinstance(dynamics, DynamicsParams):
        return DynamicsModel.from_params(dynamics)
    return dynamics


def _positions(state) -> np.ndarray:
    return state.particles if isinstance(state, ParticleState) else np.asarray(state, dtype=np.float64)


def goal_cost(predicted_final_state, goal_state) -> float:
    """
    ‖s_goal − s_H‖：堆叠粒子位置差的欧氏范数

    Args:
        predicted_final_state: ParticleState 或 (N, 3)
        goal_state: ParticleState 或 (N, 3)
    """
    predicted = _positions(predicted_final_state)
    goal = _positions(goal_state)
    if predicted.shape != goal.shape:
        raise ShapeMismatchError(f"Predicted state {predicted.shape} and goal {goal.shape} differ in shape")
    return float(np.linalg.norm(predicted - goal))


def batch_goal_costs(rollouts: np.ndarray, goal: np.ndarray, reference: Optional[np.ndarray] = None,
                     intermediate_weight: float = 1.0) -> np.ndarray:
    """
    批量代价

    Args:
        rollouts: (B, T+1, N, 3) 预测序列
        goal: (N, 3) 目标状态
        reference: (K, N, 3) 教师状态序列；给出时额外匹配中间状态 t = 1..min(T, K-1)-1
        intermediate_weight: 中间状态项权重

    Returns:
        (B,)
    """
    diff = rollouts[:, -1] - goal[None]
    costs = np.sqrt(np.sum(diff.reshape(len(rollouts), -1) ** 2, axis=1))
    if reference is not None:
        last = min(rollouts.shape[1] - 1, len(reference) - 1)
        for t in range(1, last):
            step = (rollouts[:, t] - reference[t][None]).reshape(len(rollouts), -1)
            costs = costs + intermediate_weight * np.sqrt(np.sum(step ** 2, axis=1))
    return costs


@dataclass
class OptimizedTrajectory:
    """学生形态的优化结果"""

    actions: List[PickPlaceAction]
    predicted_cost: float
    cost_history: List[float] = field(default_factory=list)
    interactions: int = 0
    replay_states: List[ParticleState] = field(default_factory=list)
    replay_performance: Optional[float] = None


def optimize_actions(s0: ParticleState, goal_state: ParticleState, dynamics: Union[DynamicsParams, RolloutModel],
                     cfg: Optional[OptimizerConfig] = None, task_id=None,
                     reference_states: Optional[Sequence[ParticleState]] = None,
                     executor: Optional[ThreadPoolExecutor] = None) -> OptimizedTrajectory:
    """
    间接轨迹优化：在学习到的动力学上寻找使最终状态接近 goal_state 的开环动作序列

    Args:
        s0: 学生形态的初始状态
        goal_state: 同一变体下教师演示的最终状态
        dynamics: 动力学参数或实现 rollout_batch 的模型
        cfg: 优化配置
        task_id: 任务ID，默认取 s0.task_id
        reference_states: 教师状态序列（中间状态匹配使用）
        executor: 候选评估线程池

    Returns:
        OptimizedTrajectory（不含回放字段）
    """
    cfg = cfg or OptimizerConfig()
    model = _as_model(dynamics)
    space = get_task_space(task_id if task_id is not None else s0.task_id)
    start = _positions(s0)
    goal = _positions(goal_state)
    if start.shape != (model.num_particles, 3) or goal.shape != start.shape:
        raise ShapeMismatchError(
            f"Dynamics expects {model.num_particles} particles, got s0 {start.shape} and goal {goal.shape}"
        )
    if isinstance(s0, ParticleState) and s0.num_pickers != model.num_pickers:
        raise MorphologyMismatchError(
            f"Dynamics trained for {model.num_pickers} pickers, s0 has {s0.num_pickers}"
        )

    pickers = model.num_pickers
    step_dim = 6 * pickers
    horizon = cfg.planning_horizon
    low, high = space.action_bounds(pickers)
    reference = None
    if cfg.match_intermediate and reference_states is not None:
        reference = np.stack([_positions(s) for s in reference_states])

    prefix = np.zeros((0, step_dim))
    best_sequence, best_cost = None, np.inf
    history: List[float] = []
    interactions = 0
    for round_index in range(cfg.commits):
        free = horizon - len(prefix)

        def cost_fn(candidates: np.ndarray, prefix=prefix, free=free) -> np.ndarray:
            sequences = np.concatenate([
                np.broadcast_to(prefix, (len(candidates),) + prefix.shape),
                candidates.reshape(len(candidates), free, step_dim),
            ], axis=1)
            try:
                rollouts = model.rollout_batch(start, sequences)
            except SimulationDivergenceError:
                return np.full(len(candidates), np.nan)
            return batch_goal_costs(rollouts, goal, reference, cfg.intermediate_weight)

        result = optimize_sequence(
            cost_fn, np.tile(low, free), np.tile(high, free), cfg,
            seed_keys=(round_index,), executor=executor,
        )
        interactions += result.evaluations * horizon
        suffix = result.best.reshape(free, step_dim)
        if result.best_cost < best_cost:
            best_cost = result.best_cost
            best_sequence = np.concatenate([prefix, suffix], axis=0)
        history.extend(min(best_cost, h) for h in result.history)
        prefix = np.concatenate([prefix, suffix[:1]], axis=0)

    actions = [PickPlaceAction.from_vector(np.clip(v, low, high)) for v in best_sequence]
    logger.debug(f"Optimized {len(actions)} actions, predicted cost {best_cost:.6g}, {interactions} model steps")
    return OptimizedTrajectory(actions=actions, predicted_cost=float(best_cost),
                               cost_history=_running_min(history), interactions=interactions)


def _running_min(values: List[float]) -> List[float]:
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64)).tolist() if values else []


def replay(simulator: ParticleSimulator, s0: ParticleState, actions: Sequence[PickPlaceAction]) -> List[ParticleState]:
    """在真实仿真器中执行动作序列；发散时抛出 SimulationDivergenceError"""
    states = [s0]
    for action in actions:
        states.append(simulator.step_pick_place(states[-1], action))
    return states


def scripted_teacher_action(task_id, state: ParticleState, t: int, variant, num_pickers: int,
                            sim_config: Optional[SimConfig] = None) -> PickPlaceAction:
    """按教师执行器数量重新查询脚本教师"""
    space = get_task_space(task_id)
    if num_pickers == space.teacher_morphology:
        return teacher_policy(space.task_id, state, t, variant, sim_config)
    if num_pickers == 1:
        return one_picker_policy(space.task_id, state, t, variant, sim_config)
    if space.task_id == TaskId.THREE_BOXES:
        return greedy_box_action(state, variant, num_pickers, sim_config)
    raise MorphologyMismatchError(f"No scripted teacher with {num_pickers} pickers for {space.task_id.value}")


def padded_teacher_actions(simulator: ParticleSimulator, s0: ParticleState, demo: TeacherDemo, num_pickers: int,
                           sim_config: Optional[SimConfig] = None):
    """
    n ≤ m：在回放状态上查询教师动作，多出的执行器原地拾取放下

    Returns:
        (states, actions)
    """
    task_id = s0.task_id
    teacher = demo.morphology
    states, actions = [s0], []
    for t in range(len(demo.state_sequence) - 1):
        current = states[-1]
        view = ParticleState(
            particles=current.particles,
            picker_positions=current.picker_positions[:teacher],
            time_step=current.time_step,
            task_id=task_id,
        )
        action = scripted_teacher_action(task_id, view, t, demo.variant, teacher, sim_config)
        idle = PickPlaceAction.no_op(current.picker_positions[teacher:num_pickers])
        padded = PickPlaceAction(
            picks=np.concatenate([action.picks, idle.picks]),
            places=np.concatenate([action.places, idle.places]),
        )
        actions.append(padded)
        states.append(simulator.step_pick_place(current, padded))
    return states, actions


@dataclass
class StudentDataset:
    """学生数据集：回放轨迹与展开的 (s, o, a, s', o', r, d) 元组"""

    task_id: Optional[TaskId]
    num_pickers: int
    trajectories: List[Trajectory] = field(default_factory=list)
    transitions: Optional[TransitionBatch] = None
    dropped: int = 0
    # 每条演示的回放得分（含被丢弃的负分；发散记为 0）
    attempted_scores: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def performances(self) -> List[float]:
        return [t.normalized_performance for t in self.trajectories]

    def performance_stats(self) -> dict:
        return summary_stats(self.performances, allow_empty=True)

    @classmethod
    def from_trajectories(cls, task_id, num_pickers: int, trajectories: List[Trajectory],
                          sim_config: Optional[SimConfig] = None, reward_mode: str = "delta",
                          with_images: bool = False, dropped: int = 0,
                          attempted_scores: Optional[List[float]] = None) -> "StudentDataset":
        """由带动作的轨迹（优化结果或脚本演示）构造数据集"""
        task = parse_task_id(task_id) if task_id is not None else None
        batches = [
            trajectory_tuples(task, t.states, t.actions, t.variant, sim_config, reward_mode, with_images)
            for t in trajectories
        ]
        return cls(
            task_id=task,
            num_pickers=num_pickers,
            trajectories=list(trajectories),
            transitions=TransitionBatch.concatenate(batches) if batches else None,
            dropped=dropped,
            attempted_scores=list(attempted_scores or []),
        )


def build_student_dataset(teacher_demos: List[TeacherDemo], dynamics: Union[DynamicsParams, RolloutModel, None],
                          sim_config: Optional[SimConfig] = None, cfg: Optional[OptimizerConfig] = None,
                          reward_mode: str = "delta", with_images: bool = False,
                          num_pickers: Optional[int] = None, task_id=None) -> StudentDataset:
    """
    生成学生数据集

    Args:
        teacher_demos: 同一任务的教师演示
        dynamics: 学生形态的动力学（n ≤ m 时可以为 None）
        sim_config: 仿真配置
        cfg: 优化配置
        reward_mode: delta 或 absolute
        with_images: 是否渲染图像观测
        num_pickers: 学生执行器数量，默认取动力学模型的执行器数量
        task_id: 任务ID（演示为空时使用）

    Returns:
        StudentDataset
    """
    cfg = cfg or OptimizerConfig()
    config = sim_config or SimConfig()
    model = _as_model(dynamics) if dynamics is not None else None
    if num_pickers is None:
        if model is None:
            raise MorphologyMismatchError("num_pickers is required when no dynamics model is given")
        num_pickers = model.num_pickers
    if not teacher_demos:
        logger.info("No teacher demos given, student dataset is empty")
        return StudentDataset(parse_task_id(task_id) if task_id is not None else None, num_pickers)

    task = parse_task_id(task_id if task_id is not None else teacher_demos[0].goal_state.task_id)
    for demo in teacher_demos:
        if demo.goal_state.task_id != task:
            raise TaskStateMismatchError(f"Demo for {demo.goal_state.task_id} mixed into {task.value} dataset")
    space = get_task_space(task)
    simulator = ParticleSimulator(task, config)
    park = picker_park_position(space)

    trajectories: List[Trajectory] = []
    dropped = 0
    attempted: List[float] = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        for index, demo in enumerate(teacher_demos):
            s0 = demo.state_sequence[0].with_pickers(num_pickers, park)
            try:
                if demo.morphology <= num_pickers:
                    states, actions = padded_teacher_actions(simulator, s0, demo, num_pickers, config)
                else:
                    if model is None:
                        raise MorphologyMismatchError("Dynamics model required when the student has fewer pickers")
                    optimized = optimize_actions(
                        s0, demo.goal_state, model, cfg, task,
                        reference_states=demo.state_sequence, executor=executor,
                    )
                    actions = optimized.actions
                    states = replay(simulator, s0, actions)
                score = normalized_performance(task, states[-1], states[0], demo.variant, config)
            except SimulationDivergenceError as e:
                logger.warning(f"Student replay {index} dropped: {e}")
                dropped += 1
                attempted.append(0.0)
                continue
            except DegenerateVariantError as e:
                logger.warning(f"Student replay {index} dropped: {e}")
                dropped += 1
                continue
            attempted.append(score)
            if score < 0:
                logger.warning(f"Student replay {index} dropped: normalized performance {score:.3f} < 0")
                dropped += 1
                continue
            trajectories.append(Trajectory(demo.variant, states, actions, num_pickers, demo.seed, score))
            progress_manager.update_progress(
                "build-student", index + 1, len(teacher_demos), performance=score, dropped=dropped
            )

    dataset = StudentDataset.from_trajectories(task, num_pickers, trajectories, config, reward_mode,
                                               with_images, dropped, attempted)
    stats = dataset.performance_stats()
    logger.info(
        f"Built {task.value} student dataset: {len(dataset)} trajectories ({dropped} dropped), "
        f"mean normalized performance {stats['mean']:.3f}"
    )
    return dataset
