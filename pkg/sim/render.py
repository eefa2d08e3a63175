"""
正交投影光栅化
每个粒子落到最近像素，按深度排序绘制；地面与晾衣杆为静态背景
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from sim.settings import SimConfig
from sim.state import IMAGE_SIZE, ParticleState
from tasks.spaces import TaskId, parse_task_id

_GROUND = np.array([0.55, 0.55, 0.55])
_SKY = np.array([0.85, 0.90, 0.95])
_PLANK = np.array([0.45, 0.30, 0.15])
_GOAL = np.array([1.0, 1.0, 0.6])
_CLOTH_LEFT = np.array([0.20, 0.45, 0.85])
_CLOTH_RIGHT = np.array([0.85, 0.35, 0.20])
_BOX_COLORS = np.array([[0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.9]])


@dataclass(frozen=True)
class CameraSpec:
    """正交相机：u/v 为图像轴对应的世界坐标轴，depth 轴大者后绘制"""

    u_axis: int
    v_axis: int
    depth_axis: int
    center: tuple
    extent: float
    # 侧视相机把 v 轴下方画成地面
    side_view: bool = False


CAMERAS = {
    # 俯视：x -> u，z -> v
    TaskId.THREE_BOXES: CameraSpec(u_axis=0, v_axis=2, depth_axis=1, center=(0.625, 0.0), extent=1.5),
    TaskId.CLOTH_FOLD: CameraSpec(u_axis=0, v_axis=2, depth_axis=1, center=(0.0, 0.0), extent=0.8),
    # 侧视：x -> u，y -> v
    TaskId.DRY_CLOTH: CameraSpec(u_axis=0, v_axis=1, depth_axis=2, center=(-0.1, 0.35), extent=0.8, side_view=True),
}


def camera_for(task_id) -> CameraSpec:
    return CAMERAS[parse_task_id(task_id)]


def _pixels(points: np.ndarray, camera: CameraSpec):
    """世界坐标 -> (row, col)，以及是否落在视野内"""
    u0 = camera.center[0] - camera.extent / 2.0
    v1 = camera.center[1] + camera.extent / 2.0
    col = np.floor((points[:, camera.u_axis] - u0) / camera.extent * IMAGE_SIZE).astype(np.int64)
    row = np.floor((v1 - points[:, camera.v_axis]) / camera.extent * IMAGE_SIZE).astype(np.int64)
    visible = (col >= 0) & (col < IMAGE_SIZE) & (row >= 0) & (row < IMAGE_SIZE)
    return row, col, visible


def _background(camera: CameraSpec, config: Optional[SimConfig], has_plank: bool) -> np.ndarray:
    image = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    if not camera.side_view:
        image[:] = _GROUND
        return image
    image[:] = _SKY
    ground_y = config.ground_height if config is not None else 0.0
    v1 = camera.center[1] + camera.extent / 2.0
    ground_row = int(np.floor((v1 - ground_y) / camera.extent * IMAGE_SIZE))
    image[max(ground_row, 0):, :] = _GROUND
    if has_plank and config is not None:
        corners = np.array([config.plank_min, config.plank_max])
        rows, cols, _ = _pixels(corners, camera)
        r0, r1 = np.clip(sorted(rows), 0, IMAGE_SIZE - 1)
        c0, c1 = np.clip(sorted(cols), 0, IMAGE_SIZE - 1)
        image[r0:r1 + 1, c0:c1 + 1] = _PLANK
    return image


def particle_colors(state: ParticleState, config: Optional[SimConfig] = None) -> np.ndarray:
    """任务指定的粒子颜色：布料左右两半不同色，箱子各一色"""
    n = state.num_particles
    if state.task_id == TaskId.THREE_BOXES:
        return np.repeat(_BOX_COLORS, 8, axis=0)[:n]
    if state.task_id in (TaskId.CLOTH_FOLD, TaskId.DRY_CLOTH) and config is not None:
        cols = np.arange(n) % config.grid_w
        left = cols < config.grid_w / 2.0
        return np.where(left[:, None], _CLOTH_LEFT, _CLOTH_RIGHT)
    return np.tile(_CLOTH_LEFT, (n, 1))


def render(
    state: ParticleState,
    camera: Optional[CameraSpec] = None,
    config: Optional[SimConfig] = None,
    goals: Optional[Sequence[Sequence[float]]] = None,
) -> np.ndarray:
    """
    渲染 32x32x3 图像

    Args:
        state: 状态
        camera: 相机，默认取任务固定相机
        config: 仿真配置（背景中的地面与晾衣杆）
        goals: 可选的目标点标记，作为背景绘制

    Returns:
        float32 图像，取值 [0, 1]
    """
    if camera is None:
        camera = camera_for(state.task_id)
    has_plank = state.task_id == TaskId.DRY_CLOTH
    image = _background(camera, config, has_plank)

    if goals is not None and len(goals):
        rows, cols, visible = _pixels(np.asarray(goals, dtype=np.float64).reshape(-1, 3), camera)
        image[rows[visible], cols[visible]] = _GOAL

    if state.num_particles:
        rows, cols, visible = _pixels(state.particles, camera)
        colors = particle_colors(state, config)
        order = np.argsort(state.particles[:, camera.depth_axis], kind="stable")
        order = order[visible[order]]
        # 后写覆盖先写，深度大的粒子在上层
        image[rows[order], cols[order]] = colors[order]

    return np.clip(image, 0.0, 1.0).astype(np.float32)
