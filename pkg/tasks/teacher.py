"""
脚本化策略
教师策略（n 个执行器）、单执行器脚本策略、箱子任务贪心求解器，以及演示数据录制
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from errors import DegenerateVariantError, MorphologyMismatchError, TeacherQualityError
from progress_manager import progress_manager
from sim.engine import ParticleSimulator
from sim.scene import box_centroids, build_topology
from sim.settings import SimConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.metrics import normalized_performance
from tasks.spaces import TaskId, TaskSpace, get_task_space
from tasks.variants import TaskVariant, sample_variant
from utils.seeding import derive_rng

logger = logging.getLogger(__name__)

# 教师演示的最低归一化性能
QUALITY_FLOOR = 0.5
# 每条演示的重采样上限
MAX_RETRIES = 20

# 脚本策略签名：(state, t, variant) -> action
ScriptedPolicy = Callable[[ParticleState, int, TaskVariant], PickPlaceAction]


@dataclass
class TeacherDemo:
    """教师演示：只有状态序列，没有动作"""

    variant: TaskVariant
    state_sequence: List[ParticleState]
    morphology: int
    seed: int = 0
    normalized_performance: float = 0.0

    @property
    def goal_state(self) -> ParticleState:
        return self.state_sequence[-1]


@dataclass
class Trajectory:
    """带动作的轨迹（脚本策略、随机策略或优化后的学生轨迹）"""

    variant: TaskVariant
    states: List[ParticleState]
    actions: List[PickPlaceAction] = field(default_factory=list)
    morphology: int = 1
    seed: int = 0
    normalized_performance: float = 0.0


def _clip(space: TaskSpace, points: np.ndarray) -> np.ndarray:
    return np.clip(points, np.asarray(space.action_low), np.asarray(space.action_high))


def _action(space: TaskSpace, picks, places) -> PickPlaceAction:
    return PickPlaceAction(picks=_clip(space, np.asarray(picks)), places=_clip(space, np.asarray(places)))


def _check_morphology(state: ParticleState, expected: int) -> None:
    if state.num_pickers != expected:
        raise MorphologyMismatchError(f"Policy expects {expected} pickers, state has {state.num_pickers}")


def _grid(state: ParticleState, config: SimConfig) -> np.ndarray:
    return state.particles.reshape(config.grid_h, config.grid_w, 3)


def _near_plank_column(grid: np.ndarray, config: SimConfig) -> int:
    """离晾衣杆更近的一列（布料局部 x 轴的一端）"""
    plank_x = 0.5 * (config.plank_min[0] + config.plank_max[0])
    first = abs(grid[:, 0, 0].mean() - plank_x)
    last = abs(grid[:, -1, 0].mean() - plank_x)
    return 0 if first < last else grid.shape[1] - 1


def _hang_target(space: TaskSpace, config: SimConfig, z: float) -> np.ndarray:
    plank_x = 0.5 * (config.plank_min[0] + config.plank_max[0])
    return np.array([plank_x + 0.01, config.plank_max[1] + space.place_lift, z])


def teacher_policy(task_id, state: ParticleState, t: int, variant: Optional[TaskVariant] = None,
                   sim_config: Optional[SimConfig] = None) -> PickPlaceAction:
    """
    教师脚本策略

    Args:
        task_id: 任务ID
        state: 当前状态（教师形态）
        t: 回合内步数
        variant: 任务变体（ThreeBoxes 需要目标）
        sim_config: 仿真配置

    Returns:
        n 个执行器的动作
    """
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    _check_morphology(state, space.teacher_morphology)

    if space.task_id == TaskId.THREE_BOXES:
        # 同时抓起所有箱子，各自放到目标
        groups = build_topology(space.task_id, config).box_groups
        centroids = box_centroids(state.particles, groups)
        return _action(space, centroids, np.asarray(variant.box_goals))

    grid = _grid(state, config)
    last = config.grid_w - 1
    if space.task_id == TaskId.CLOTH_FOLD:
        # 两个左角搬到两个右角上方；之后每步重复同一动作
        picks = np.stack([grid[0, 0], grid[-1, 0]])
        places = np.stack([grid[0, last], grid[-1, last]]) + np.array([0.0, space.place_lift, 0.0])
        return _action(space, picks, places)

    # DryCloth：抓近端两角，保持间距搬到晾衣杆上方
    column = _near_plank_column(grid, config)
    picks = np.stack([grid[0, column], grid[-1, column]])
    half = 0.5 * np.linalg.norm(picks[0] - picks[1])
    middle = picks[:, 2].mean()
    sign = 1.0 if picks[0, 2] <= picks[1, 2] else -1.0
    places = np.stack([
        _hang_target(space, config, middle - sign * half),
        _hang_target(space, config, middle + sign * half),
    ])
    return _action(space, picks, places)


def greedy_box_action(state: ParticleState, variant: TaskVariant, num_pickers: int = 1,
                      sim_config: Optional[SimConfig] = None) -> PickPlaceAction:
    """箱子任务贪心求解：把离目标最远的 m 个箱子放到目标"""
    space = get_task_space(TaskId.THREE_BOXES)
    groups = build_topology(space.task_id, sim_config or SimConfig()).box_groups
    centroids = box_centroids(state.particles, groups)
    goals = np.asarray(variant.box_goals)
    order = np.argsort(-np.linalg.norm(centroids - goals, axis=1), kind="stable")
    chosen = [order[i % len(order)] for i in range(num_pickers)]
    return _action(space, centroids[chosen], goals[chosen])


def one_picker_policy(task_id, state: ParticleState, t: int, variant: Optional[TaskVariant] = None,
                      sim_config: Optional[SimConfig] = None) -> PickPlaceAction:
    """单执行器脚本策略（预编程的 1 执行器演示）"""
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    _check_morphology(state, 1)

    if space.task_id == TaskId.THREE_BOXES:
        groups = build_topology(space.task_id, config).box_groups
        centroids = box_centroids(state.particles, groups)
        box = min(t, space.num_boxes - 1)
        return _action(space, centroids[box:box + 1], np.asarray(variant.box_goals)[box:box + 1])

    grid = _grid(state, config)
    last = config.grid_w - 1
    rows = (0, config.grid_h - 1, config.grid_h // 2)
    row = rows[min(t, len(rows) - 1)]
    if space.task_id == TaskId.CLOTH_FOLD:
        pick = grid[row, 0]
        place = grid[row, last] + np.array([0.0, space.place_lift, 0.0])
        return _action(space, pick[None], place[None])

    column = _near_plank_column(grid, config)
    order = (config.grid_h // 2, 0, config.grid_h - 1)
    pick = grid[order[min(t, len(order) - 1)], column]
    return _action(space, pick[None], _hang_target(space, config, pick[2])[None])


def run_episode(simulator: ParticleSimulator, s0: ParticleState, policy: ScriptedPolicy,
                variant: TaskVariant, horizon: int):
    """按策略执行一个回合，返回 (states, actions)"""
    states = [s0]
    actions = []
    for t in range(horizon):
        action = policy(states[-1], t, variant)
        actions.append(action)
        states.append(simulator.step_pick_place(states[-1], action))
    return states, actions


def _episode_score(space, states, variant, config) -> float:
    return normalized_performance(space.task_id, states[-1], states[0], variant, config)


def record_teacher_dataset(task_id, k_t: int = 100, seed: int = 0, sim_config: Optional[SimConfig] = None,
                           quality_floor: float = QUALITY_FLOOR, max_retries: int = MAX_RETRIES) -> List[TeacherDemo]:
    """
    录制教师演示数据集

    Args:
        task_id: 任务ID
        k_t: 演示数量
        seed: 随机种子
        sim_config: 仿真配置
        quality_floor: 最低归一化性能，低于则重采样
        max_retries: 单条演示的重采样上限

    Returns:
        TeacherDemo 列表（只含状态）
    """
    if k_t < 1:
        raise ValueError(f"k_t must be at least 1, got {k_t}")
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    simulator = ParticleSimulator(space.task_id, config)

    def policy(state, t, variant):
        return teacher_policy(space.task_id, state, t, variant, config)

    demos: List[TeacherDemo] = []
    for k in range(k_t):
        for attempt in range(max_retries):
            rng = derive_rng(seed, k, attempt)
            variant = sample_variant(space.task_id, rng)
            s0 = simulator.reset(variant, seed=seed, num_pickers=space.teacher_morphology)
            states, _ = run_episode(simulator, s0, policy, variant, space.horizon)
            try:
                score = _episode_score(space, states, variant, config)
            except DegenerateVariantError as e:
                logger.warning(f"Teacher demo {k} attempt {attempt} skipped: {e}")
                continue
            if score >= quality_floor:
                demos.append(TeacherDemo(variant, states, space.teacher_morphology, seed, score))
                break
            logger.warning(f"Teacher demo {k} attempt {attempt} below quality floor: {score:.3f} < {quality_floor}")
        else:
            raise TeacherQualityError(
                f"Teacher policy failed to reach {quality_floor} on {space.task_id.value} after {max_retries} attempts"
            )
        progress_manager.update_progress("gen-teacher", k + 1, k_t, performance=demos[-1].normalized_performance)

    logger.info(
        f"Recorded {len(demos)} {space.task_id.value} teacher demos, "
        f"mean normalized performance {np.mean([d.normalized_performance for d in demos]):.3f}"
    )
    return demos


def record_scripted_dataset(task_id, policy: ScriptedPolicy, k: int, seed: int, num_pickers: int,
                            sim_config: Optional[SimConfig] = None, stage: str = "scripted") -> List[Trajectory]:
    """
    用任意脚本策略录制带动作的轨迹（例如单执行器演示 D_1p）

    Args:
        task_id: 任务ID
        policy: (state, t, variant) -> action
        k: 轨迹数量
        seed: 随机种子
        num_pickers: 执行器数量
    """
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    simulator = ParticleSimulator(space.task_id, config)
    trajectories = []
    for index in range(k):
        variant = sample_variant(space.task_id, derive_rng(seed, index))
        s0 = simulator.reset(variant, seed=seed, num_pickers=num_pickers)
        states, actions = run_episode(simulator, s0, policy, variant, space.horizon)
        try:
            score = _episode_score(space, states, variant, config)
        except DegenerateVariantError as e:
            logger.warning(f"Scripted episode {index} skipped: {e}")
            continue
        trajectories.append(Trajectory(variant, states, actions, num_pickers, seed, score))
        progress_manager.update_progress(stage, index + 1, k)
    return trajectories


def scripted_policy_for(task_id, kind: str, sim_config: Optional[SimConfig] = None) -> ScriptedPolicy:
    """按名称取脚本策略：teacher、one_picker、greedy"""
    space = get_task_space(task_id)
    if kind == "teacher":
        return lambda state, t, variant: teacher_policy(space.task_id, state, t, variant, sim_config)
    if kind == "one_picker":
        return lambda state, t, variant: one_picker_policy(space.task_id, state, t, variant, sim_config)
    if kind == "greedy":
        if space.task_id != TaskId.THREE_BOXES:
            raise ValueError("Greedy solver exists only for ThreeBoxes")
        return lambda state, t, variant: greedy_box_action(state, variant, state.num_pickers, sim_config)
    raise ValueError(f"Unknown scripted policy: {kind}")
