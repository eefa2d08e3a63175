"""
任务空间定义
动作边界、变体范围、末端执行器数量等与任务相关的常量
"""
import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import UnknownTaskError

# 所有任务的回合长度
EPISODE_HORIZON = 3


class TaskId(enum.Enum):
    """任务枚举"""
    THREE_BOXES = "ThreeBoxes"
    CLOTH_FOLD = "ClothFold"
    DRY_CLOTH = "DryCloth"


@dataclass(frozen=True)
class TaskSpace:
    """单个任务的空间描述（单位：米、弧度）"""

    task_id: TaskId
    action_low: Tuple[float, float, float]
    action_high: Tuple[float, float, float]
    teacher_morphology: int
    student_morphology: int
    has_cloth: bool
    has_plank: bool
    # 布料初始中心 (x, z)
    cloth_center: Tuple[float, float] = (0.0, 0.0)
    # 变体范围（配置默认值）
    rotation_range: float = 0.0
    translation_range: float = 0.0
    # 箱子任务
    num_boxes: int = 0
    box_half_size: float = 0.025
    line_range: Tuple[float, float] = (0.0, 0.0)
    # DryCloth 悬挂区域
    hang_half_width: float = 0.1
    hang_min_height: float = 0.02
    # 教师折叠/悬挂时的抬升高度
    place_lift: float = 0.05
    horizon: int = EPISODE_HORIZON

    @property
    def box_width(self) -> float:
        return 2.0 * self.box_half_size

    def action_bounds(self, num_pickers: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        按末端执行器数量展开动作边界

        Returns:
            (low, high)，形状均为 (6m,)，布局为每个执行器 [pick_xyz, place_xyz]
        """
        low = np.tile(np.asarray(self.action_low, dtype=np.float64), 2 * num_pickers)
        high = np.tile(np.asarray(self.action_high, dtype=np.float64), 2 * num_pickers)
        return low, high

    @property
    def action_diagonal(self) -> float:
        """动作空间对角线长度，用作位移输出尺度"""
        return float(np.linalg.norm(np.subtract(self.action_high, self.action_low)))


TASK_SPACES = {
    TaskId.THREE_BOXES: TaskSpace(
        task_id=TaskId.THREE_BOXES,
        # 沿直线 -0.1..1.35，y/z 为窄带
        action_low=(-0.1, 0.0, -0.05),
        action_high=(1.35, 0.1, 0.05),
        teacher_morphology=3,
        student_morphology=1,
        has_cloth=False,
        has_plank=False,
        num_boxes=3,
        line_range=(-0.1, 1.35),
    ),
    TaskId.CLOTH_FOLD: TaskSpace(
        task_id=TaskId.CLOTH_FOLD,
        action_low=(-0.9, 0.0, -0.9),
        action_high=(0.9, 0.7, 0.9),
        teacher_morphology=2,
        student_morphology=1,
        has_cloth=True,
        has_plank=False,
        rotation_range=math.radians(30.0),
    ),
    TaskId.DRY_CLOTH: TaskSpace(
        task_id=TaskId.DRY_CLOTH,
        action_low=(-0.5, 0.0, -0.5),
        action_high=(0.5, 0.7, 0.5),
        teacher_morphology=2,
        student_morphology=1,
        has_cloth=True,
        has_plank=True,
        cloth_center=(-0.25, 0.0),
        rotation_range=math.radians(30.0),
        translation_range=0.1,
        place_lift=0.06,
    ),
}


def parse_task_id(task_id) -> TaskId:
    """把字符串或枚举解析为 TaskId"""
    if isinstance(task_id, TaskId):
        return task_id
    for candidate in TaskId:
        if task_id in (candidate.value, candidate.name, candidate.name.lower()):
            return candidate
    raise UnknownTaskError(f"Unknown task id: {task_id!r}")


def get_task_space(task_id) -> TaskSpace:
    """获取任务空间"""
    return TASK_SPACES[parse_task_id(task_id)]
