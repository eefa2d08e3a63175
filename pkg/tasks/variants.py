"""
任务变体
变体采样与合法性检查
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import VariantError
from tasks.spaces import TaskId, TaskSpace, get_task_space, parse_task_id

Vec3 = Tuple[float, float, float]

# 变体比较的数值容差
_RANGE_EPS = 1e-9
_MAX_REJECTIONS = 10000


@dataclass(frozen=True)
class TaskVariant:
    """任务变体，与任务无关的字段为 None"""

    task_id: TaskId
    cloth_rotation: Optional[float] = None
    cloth_translation: Optional[Tuple[float, float]] = None
    box_starts: Optional[Tuple[Vec3, ...]] = None
    box_goals: Optional[Tuple[Vec3, ...]] = None
    # 折叠线：地面上的一点 (x, z) 与方向 (dx, dz)
    fold_line: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None

    def to_dict(self) -> dict:
        """序列化为 JSON 友好的字典"""
        return {
            "task_id": self.task_id.value,
            "cloth_rotation": self.cloth_rotation,
            "cloth_translation": list(self.cloth_translation) if self.cloth_translation is not None else None,
            "box_starts": [list(p) for p in self.box_starts] if self.box_starts is not None else None,
            "box_goals": [list(p) for p in self.box_goals] if self.box_goals is not None else None,
            "fold_line": [list(self.fold_line[0]), list(self.fold_line[1])] if self.fold_line is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskVariant":
        def _vecs(values):
            return tuple(tuple(float(c) for c in v) for v in values) if values is not None else None

        fold = data.get("fold_line")
        return cls(
            task_id=parse_task_id(data["task_id"]),
            cloth_rotation=data.get("cloth_rotation"),
            cloth_translation=tuple(data["cloth_translation"]) if data.get("cloth_translation") is not None else None,
            box_starts=_vecs(data.get("box_starts")),
            box_goals=_vecs(data.get("box_goals")),
            fold_line=(tuple(fold[0]), tuple(fold[1])) if fold is not None else None,
        )


def cloth_fold_line(space: TaskSpace, rotation: float, translation: Tuple[float, float]) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """布料中心线（布料坐标系 z 轴）在地面上的位置"""
    center = (space.cloth_center[0] + translation[0], space.cloth_center[1] + translation[1])
    return center, (math.sin(rotation), math.cos(rotation))


def _sample_line_positions(space: TaskSpace, rng: np.random.Generator) -> Tuple[Vec3, ...]:
    """在直线段上拒绝采样箱子位置，保证两两间距不小于箱宽"""
    low = space.line_range[0] + space.box_half_size
    high = space.line_range[1] - space.box_half_size
    for _ in range(_MAX_REJECTIONS):
        xs = rng.uniform(low, high, size=space.num_boxes)
        if np.all(np.diff(np.sort(xs)) >= space.box_width):
            return tuple((float(x), space.box_half_size, 0.0) for x in xs)
    raise VariantError(f"Could not place {space.num_boxes} boxes on the line after {_MAX_REJECTIONS} draws")


def sample_variant(task_id, rng: np.random.Generator) -> TaskVariant:
    """
    在任务分布内均匀采样一个变体

    Args:
        task_id: 任务ID
        rng: 显式传入的随机数流

    Returns:
        TaskVariant
    """
    space = get_task_space(task_id)
    if space.task_id == TaskId.THREE_BOXES:
        return TaskVariant(
            task_id=space.task_id,
            box_starts=_sample_line_positions(space, rng),
            box_goals=_sample_line_positions(space, rng),
        )

    rotation = float(rng.uniform(-space.rotation_range, space.rotation_range))
    if space.task_id == TaskId.CLOTH_FOLD:
        return TaskVariant(
            task_id=space.task_id,
            cloth_rotation=rotation,
            fold_line=cloth_fold_line(space, rotation, (0.0, 0.0)),
        )

    translation = tuple(float(t) for t in rng.uniform(-space.translation_range, space.translation_range, size=2))
    return TaskVariant(task_id=space.task_id, cloth_rotation=rotation, cloth_translation=translation)


def validate_variant(variant: TaskVariant) -> TaskSpace:
    """检查变体字段与范围，返回对应任务空间"""
    space = get_task_space(variant.task_id)

    if space.task_id == TaskId.THREE_BOXES:
        if variant.box_starts is None or variant.box_goals is None:
            raise VariantError("ThreeBoxes variant requires box_starts and box_goals")
        if variant.cloth_rotation is not None or variant.cloth_translation is not None:
            raise VariantError("ThreeBoxes variant must not carry cloth fields")
        for name, positions in (("box_starts", variant.box_starts), ("box_goals", variant.box_goals)):
            if len(positions) != space.num_boxes:
                raise VariantError(f"{name} must hold {space.num_boxes} positions, got {len(positions)}")
            for x, _, _ in positions:
                if not (space.line_range[0] - _RANGE_EPS <= x <= space.line_range[1] + _RANGE_EPS):
                    raise VariantError(f"{name} coordinate {x} outside line range {space.line_range}")
        return space

    if variant.box_starts is not None or variant.box_goals is not None:
        raise VariantError(f"{space.task_id.value} variant must not carry box fields")
    rotation = variant.cloth_rotation if variant.cloth_rotation is not None else 0.0
    if abs(rotation) > space.rotation_range + _RANGE_EPS:
        raise VariantError(f"Cloth rotation {rotation} outside ±{space.rotation_range}")
    if variant.cloth_translation is not None:
        if space.translation_range == 0.0 and any(t != 0.0 for t in variant.cloth_translation):
            raise VariantError(f"{space.task_id.value} has no translation variation")
        if any(abs(t) > space.translation_range + _RANGE_EPS for t in variant.cloth_translation):
            raise VariantError(f"Cloth translation {variant.cloth_translation} outside ±{space.translation_range}")
    return space
