"""
仿真状态与动作类型
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from errors import ShapeMismatchError
from tasks.spaces import TaskId

# 32x32x3 RGB，取值 [0, 1]
IMAGE_SIZE = 32


@dataclass
class ParticleState:
    """POMDP 状态：物体粒子位置 + 末端执行器位置"""

    particles: np.ndarray
    picker_positions: np.ndarray
    attached: Tuple[Optional[int], ...] = ()
    time_step: int = 0
    task_id: Optional[TaskId] = None

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.float64)
        self.picker_positions = np.asarray(self.picker_positions, dtype=np.float64).reshape(-1, 3)
        if self.particles.ndim != 2 or self.particles.shape[1] != 3:
            raise ShapeMismatchError(f"particles must be (N, 3), got {self.particles.shape}")
        if not self.attached:
            self.attached = tuple(None for _ in range(len(self.picker_positions)))
        if len(self.attached) != len(self.picker_positions):
            raise ShapeMismatchError(
                f"attached has {len(self.attached)} entries for {len(self.picker_positions)} pickers"
            )
        for index in self.attached:
            if index is not None and not (0 <= index < len(self.particles)):
                raise ShapeMismatchError(f"attached index {index} outside [0, {len(self.particles)})")

    @property
    def num_particles(self) -> int:
        return int(self.particles.shape[0])

    @property
    def num_pickers(self) -> int:
        return int(self.picker_positions.shape[0])

    def copy(self) -> "ParticleState":
        return ParticleState(
            particles=self.particles.copy(),
            picker_positions=self.picker_positions.copy(),
            attached=tuple(self.attached),
            time_step=self.time_step,
            task_id=self.task_id,
        )

    def with_pickers(self, num_pickers: int, park: np.ndarray) -> "ParticleState":
        """换成另一种形态（执行器数量），执行器停在 park 位置"""
        return ParticleState(
            particles=self.particles.copy(),
            picker_positions=np.tile(np.asarray(park, dtype=np.float64), (num_pickers, 1)),
            attached=tuple(None for _ in range(num_pickers)),
            time_step=self.time_step,
            task_id=self.task_id,
        )


@dataclass(frozen=True)
class PickPlaceAction:
    """每个执行器一对 (pick_xyz, place_xyz)"""

    picks: np.ndarray = field(repr=False)
    places: np.ndarray = field(repr=False)

    def __post_init__(self):
        picks = np.asarray(self.picks, dtype=np.float64).reshape(-1, 3)
        places = np.asarray(self.places, dtype=np.float64).reshape(-1, 3)
        if picks.shape != places.shape:
            raise ShapeMismatchError(f"picks {picks.shape} and places {places.shape} differ")
        object.__setattr__(self, "picks", picks)
        object.__setattr__(self, "places", places)

    @property
    def num_pickers(self) -> int:
        return int(self.picks.shape[0])

    def to_vector(self) -> np.ndarray:
        """展平为 (6m,)：[pick_0, place_0, pick_1, place_1, ...]"""
        return np.concatenate([self.picks, self.places], axis=1).reshape(-1)

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "PickPlaceAction":
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size % 6 != 0:
            raise ShapeMismatchError(f"Action vector length {vector.size} is not a multiple of 6")
        pairs = vector.reshape(-1, 6)
        return cls(picks=pairs[:, :3], places=pairs[:, 3:])

    @classmethod
    def no_op(cls, points: np.ndarray) -> "PickPlaceAction":
        """原地拾取并放下"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(picks=points, places=points.copy())
