"""
场景构建
布料网格、箱子粒子簇、弹簧拓扑与着色分组
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from sim.settings import SimConfig
from tasks.spaces import TaskId, TaskSpace, get_task_space

logger = logging.getLogger(__name__)

# 箱子角点在中心坐标系下的偏移（单位立方体）
_BOX_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)


@dataclass(frozen=True)
class SceneTopology:
    """任务的静态拓扑：弹簧、着色分组、刚体粒子簇"""

    task_id: Optional[TaskId]
    num_particles: int
    springs: np.ndarray = field(repr=False)
    rest_lengths: np.ndarray = field(repr=False)
    # 每个颜色内的弹簧互不共享粒子，可整组并行投影
    colors: Tuple[np.ndarray, ...] = field(repr=False, default=())
    # (num_boxes, 8) 粒子下标
    box_groups: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    has_plank: bool = False
    grid_shape: Optional[Tuple[int, int]] = None

    @property
    def is_rigid(self) -> bool:
        return len(self.box_groups) > 0

    @property
    def num_springs(self) -> int:
        return int(len(self.springs))


def cloth_springs(grid_w: int, grid_h: int, rest_length: float) -> Tuple[np.ndarray, np.ndarray]:
    """结构弹簧 + 剪切弹簧"""
    index = np.arange(grid_w * grid_h).reshape(grid_h, grid_w)
    diagonal = rest_length * math.sqrt(2.0)
    blocks = [
        (index[:, :-1], index[:, 1:], rest_length),
        (index[:-1, :], index[1:, :], rest_length),
        (index[:-1, :-1], index[1:, 1:], diagonal),
        (index[:-1, 1:], index[1:, :-1], diagonal),
    ]
    springs = np.concatenate(
        [np.stack([a.reshape(-1), b.reshape(-1)], axis=1) for a, b, _ in blocks], axis=0
    )
    rest = np.concatenate([np.full(a.size, length) for a, _, length in blocks])
    return springs.astype(np.int64), rest.astype(np.float64)


def color_springs(springs: np.ndarray, num_particles: int) -> Tuple[np.ndarray, ...]:
    """
    贪心边着色

    Returns:
        每种颜色对应的弹簧下标数组，同色弹簧两两不共享端点
    """
    used: List[set] = [set() for _ in range(num_particles)]
    assignment = np.empty(len(springs), dtype=np.int64)
    for edge, (i, j) in enumerate(springs):
        taken = used[i] | used[j]
        color = 0
        while color in taken:
            color += 1
        assignment[edge] = color
        used[i].add(color)
        used[j].add(color)
    num_colors = int(assignment.max()) + 1 if len(springs) else 0
    return tuple(np.flatnonzero(assignment == c) for c in range(num_colors))


def cloth_layout(
    config: SimConfig,
    center_xz: Tuple[float, float],
    rotation: float,
    height: float,
) -> np.ndarray:
    """
    平铺布料的粒子位置

    Args:
        config: 仿真配置
        center_xz: 布料中心 (x, z)
        rotation: 绕 y 轴旋转角（弧度）
        height: 布料高度

    Returns:
        (grid_w * grid_h, 3) 位置
    """
    cols = (np.arange(config.grid_w) - (config.grid_w - 1) / 2.0) * config.rest_length
    rows = (np.arange(config.grid_h) - (config.grid_h - 1) / 2.0) * config.rest_length
    local_z, local_x = np.meshgrid(rows, cols, indexing="ij")
    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    x = center_xz[0] + cos_t * local_x + sin_t * local_z
    z = center_xz[1] - sin_t * local_x + cos_t * local_z
    y = np.full_like(x, height)
    return np.stack([x.reshape(-1), y.reshape(-1), z.reshape(-1)], axis=1)


def box_layout(centers: np.ndarray, half_size: float) -> np.ndarray:
    """每个箱子 8 个角点，按箱子顺序连续排列"""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    corners = centers[:, None, :] + half_size * _BOX_CORNER_SIGNS[None, :, :]
    return corners.reshape(-1, 3)


def box_centroids(particles: np.ndarray, box_groups: np.ndarray) -> np.ndarray:
    return particles[box_groups].mean(axis=1)


@lru_cache(maxsize=32)
def build_topology(task_id: Optional[TaskId], config: SimConfig, num_particles: int = 0) -> SceneTopology:
    """
    构建任务拓扑（结果只读，可缓存）

    Args:
        task_id: 任务ID；None 表示无约束的自由粒子
        config: 仿真配置
        num_particles: 自由粒子数量（仅 task_id 为 None 时使用）
    """
    empty_springs = np.zeros((0, 2), dtype=np.int64)
    empty_rest = np.zeros(0, dtype=np.float64)

    if task_id is None:
        return SceneTopology(None, num_particles, empty_springs, empty_rest)

    space: TaskSpace = get_task_space(task_id)
    if not space.has_cloth:
        groups = np.arange(space.num_boxes * 8, dtype=np.int64).reshape(space.num_boxes, 8)
        return SceneTopology(task_id, space.num_boxes * 8, empty_springs, empty_rest, box_groups=groups)

    count = config.grid_w * config.grid_h
    springs, rest = cloth_springs(config.grid_w, config.grid_h, config.rest_length)
    colors = color_springs(springs, count)
    logger.debug(f"Built cloth topology {config.grid_w}x{config.grid_h}: {len(springs)} springs, {len(colors)} colors")
    return SceneTopology(
        task_id,
        count,
        springs,
        rest,
        colors=colors,
        has_plank=space.has_plank,
        grid_shape=(config.grid_h, config.grid_w),
    )


def picker_park_position(space: TaskSpace) -> np.ndarray:
    """执行器初始停靠位置：动作空间顶面中心"""
    low = np.asarray(space.action_low, dtype=np.float64)
    high = np.asarray(space.action_high, dtype=np.float64)
    return np.array([(low[0] + high[0]) / 2.0, high[1], (low[2] + high[2]) / 2.0])
