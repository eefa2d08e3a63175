"""
任务性能指标
"""
import logging
from typing import Optional

import numpy as np

from errors import DegenerateVariantError, TaskStateMismatchError, VariantError
from sim.scene import box_centroids, build_topology
from sim.settings import SimConfig
from sim.state import ParticleState
from tasks.spaces import TaskId, TaskSpace, get_task_space
from tasks.variants import TaskVariant

logger = logging.getLogger(__name__)


def _check_state(space: TaskSpace, state: ParticleState, config: SimConfig) -> None:
    if state.task_id is not None and state.task_id != space.task_id:
        raise TaskStateMismatchError(
            f"State belongs to {state.task_id.value}, metric requested for {space.task_id.value}"
        )
    expected = space.num_boxes * 8 if not space.has_cloth else config.grid_w * config.grid_h
    if state.num_particles != expected:
        raise TaskStateMismatchError(
            f"{space.task_id.value} state must have {expected} particles, got {state.num_particles}"
        )


def _boxes_score(space: TaskSpace, particles: np.ndarray, variant: Optional[TaskVariant]) -> float:
    if variant is None or variant.box_goals is None:
        raise VariantError("ThreeBoxes performance requires the variant's box goals")
    groups = build_topology(space.task_id, SimConfig()).box_groups
    centroids = box_centroids(particles, groups)
    goals = np.asarray(variant.box_goals, dtype=np.float64)
    return -float(np.sum(np.linalg.norm(centroids - goals, axis=1)))


def fold_pairs(grid_w: int, grid_h: int):
    """折叠线两侧镜像粒子对 (row, j) <-> (row, W-1-j)"""
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w // 2), indexing="ij")
    left = (rows * grid_w + cols).reshape(-1)
    right = (rows * grid_w + (grid_w - 1 - cols)).reshape(-1)
    return left, right


def _fold_score(particles: np.ndarray, config: SimConfig) -> float:
    left, right = fold_pairs(config.grid_w, config.grid_h)
    return -float(np.mean(np.linalg.norm(particles[left] - particles[right], axis=1)))


def hanging_fraction(particles: np.ndarray, space: TaskSpace, config: SimConfig) -> float:
    """位于晾衣杆两侧悬挂区域内且离地的粒子比例"""
    plank_x = 0.5 * (config.plank_min[0] + config.plank_max[0])
    above = particles[:, 1] > config.ground_height + space.hang_min_height
    near = np.abs(particles[:, 0] - plank_x) <= space.hang_half_width
    return float(np.mean(above & near))


def performance(task_id, state: ParticleState, variant: Optional[TaskVariant] = None,
                sim_config: Optional[SimConfig] = None) -> float:
    """
    任务性能 p(s)

    Args:
        task_id: 任务ID
        state: 状态
        variant: 任务变体（ThreeBoxes 需要目标位置）
        sim_config: 仿真配置（布料分辨率、晾衣杆几何）

    Returns:
        分数，越大越好
    """
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    _check_state(space, state, config)
    if space.task_id == TaskId.THREE_BOXES:
        return _boxes_score(space, state.particles, variant)
    if space.task_id == TaskId.CLOTH_FOLD:
        return _fold_score(state.particles, config)
    return hanging_fraction(state.particles, space, config)


def draped_state(task_id, sim_config: Optional[SimConfig] = None) -> ParticleState:
    """把布料沿局部 x 轴对折挂在晾衣杆上的理想状态"""
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    top = config.plank_max[1] + config.collision_margin
    plank_z = 0.5 * (config.plank_min[2] + config.plank_max[2])
    arc = (np.arange(config.grid_w) - (config.grid_w - 1) / 2.0) * config.rest_length
    depth = (np.arange(config.grid_h) - (config.grid_h - 1) / 2.0) * config.rest_length
    depth_grid, arc_grid = np.meshgrid(depth, arc, indexing="ij")
    x = np.where(arc_grid < 0, config.plank_min[0] - config.collision_margin, config.plank_max[0] + config.collision_margin)
    y = top - np.abs(arc_grid)
    z = plank_z + depth_grid
    particles = np.stack([x.reshape(-1), y.reshape(-1), z.reshape(-1)], axis=1)
    return ParticleState(
        particles=particles,
        picker_positions=np.zeros((space.teacher_morphology, 3)),
        task_id=space.task_id,
    )


def p_opt(task_id, variant: Optional[TaskVariant] = None, sim_config: Optional[SimConfig] = None) -> float:
    """任务可达到的最优性能"""
    space = get_task_space(task_id)
    if space.task_id in (TaskId.THREE_BOXES, TaskId.CLOTH_FOLD):
        return 0.0
    return performance(space.task_id, draped_state(space.task_id, sim_config), variant, sim_config)


def normalized_performance(task_id, s_t: ParticleState, s_0: ParticleState,
                           variant: Optional[TaskVariant] = None,
                           sim_config: Optional[SimConfig] = None) -> float:
    """
    归一化性能 (p(s_t) - p(s_0)) / (p_opt - p(s_0))

    Returns:
        初始状态为 0，达到最优为 1，状态退化时可为负
    """
    best = p_opt(task_id, variant, sim_config)
    start = performance(task_id, s_0, variant, sim_config)
    if best == start:
        raise DegenerateVariantError(f"p_opt equals initial performance ({start}) for {get_task_space(task_id).task_id.value}")
    current = performance(task_id, s_t, variant, sim_config)
    return (current - start) / (best - start)
