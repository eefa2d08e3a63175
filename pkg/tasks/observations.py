"""
观测与奖励
状态观测向量、图像观测、按任务指标计算的奖励，以及轨迹到 (s, o, a, s', o', r, d) 元组的展开
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from sim.render import render
from sim.scene import box_centroids, build_topology
from sim.settings import SimConfig
from sim.state import ParticleState
from tasks.metrics import p_opt, performance
from tasks.spaces import TaskId, get_task_space
from tasks.variants import TaskVariant

# 布料关键点网格边长
KEYPOINT_GRID = 5

REWARD_MODES = ("delta", "absolute")


def keypoint_indices(config: SimConfig, size: int = KEYPOINT_GRID) -> np.ndarray:
    rows = np.round(np.linspace(0, config.grid_h - 1, size)).astype(np.int64)
    cols = np.round(np.linspace(0, config.grid_w - 1, size)).astype(np.int64)
    return (rows[:, None] * config.grid_w + cols[None, :]).reshape(-1)


def observation_dim(task_id, num_pickers: int) -> int:
    space = get_task_space(task_id)
    if space.task_id == TaskId.THREE_BOXES:
        body = 2 * space.num_boxes * 3
    else:
        body = KEYPOINT_GRID * KEYPOINT_GRID * 3
    return body + 3 * num_pickers + 1


def state_observation(task_id, state: ParticleState, variant: Optional[TaskVariant],
                      sim_config: Optional[SimConfig] = None) -> np.ndarray:
    """
    低维状态观测

    ThreeBoxes：箱子中心 + 目标；布料：5x5 关键点；之后拼接执行器位置与 t/H
    """
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    if space.task_id == TaskId.THREE_BOXES:
        groups = build_topology(space.task_id, config).box_groups
        body = np.concatenate([
            box_centroids(state.particles, groups).reshape(-1),
            np.asarray(variant.box_goals, dtype=np.float64).reshape(-1),
        ])
    else:
        body = state.particles[keypoint_indices(config)].reshape(-1)
    progress = np.array([state.time_step / space.horizon])
    return np.concatenate([body, state.picker_positions.reshape(-1), progress]).astype(np.float32)


def image_observation(task_id, state: ParticleState, variant: Optional[TaskVariant],
                      sim_config: Optional[SimConfig] = None) -> np.ndarray:
    """32x32 RGB 观测；箱子任务把目标画在背景上"""
    space = get_task_space(task_id)
    goals = variant.box_goals if space.task_id == TaskId.THREE_BOXES and variant is not None else None
    return render(state, config=sim_config or SimConfig(), goals=goals)


class RewardFunction:
    """基于任务归一化性能的奖励；delta 模式为势函数差分，absolute 模式为当前归一化性能"""

    def __init__(self, task_id, variant: Optional[TaskVariant], s0: ParticleState,
                 sim_config: Optional[SimConfig] = None, mode: str = "delta"):
        if mode not in REWARD_MODES:
            raise ValueError(f"Unknown reward mode: {mode}")
        self.task_id = get_task_space(task_id).task_id
        self.variant = variant
        self.config = sim_config or SimConfig()
        self.mode = mode
        self.start = performance(self.task_id, s0, variant, self.config)
        self.best = p_opt(self.task_id, variant, self.config)
        self.span = self.best - self.start if self.best != self.start else 1.0

    def normalized(self, state: ParticleState) -> float:
        return (performance(self.task_id, state, self.variant, self.config) - self.start) / self.span

    def __call__(self, state: ParticleState, next_state: ParticleState) -> float:
        if self.mode == "absolute":
            return self.normalized(next_state)
        return self.normalized(next_state) - self.normalized(state)


@dataclass
class TransitionBatch:
    """按时间展开的元组数组"""

    states: np.ndarray        # (T, N, 3)
    next_states: np.ndarray   # (T, N, 3)
    observations: np.ndarray  # (T, D)
    next_observations: np.ndarray
    actions: np.ndarray       # (T, 6m)
    rewards: np.ndarray       # (T,)
    dones: np.ndarray         # (T,)
    images: Optional[np.ndarray] = None       # (T, 32, 32, 3)
    next_images: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(len(self.actions))

    @classmethod
    def concatenate(cls, batches: List["TransitionBatch"]) -> "TransitionBatch":
        def stack(name):
            parts = [getattr(b, name) for b in batches]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts, axis=0)

        return cls(**{name: stack(name) for name in cls.__dataclass_fields__})


def trajectory_tuples(task_id, states: List[ParticleState], actions, variant: Optional[TaskVariant],
                      sim_config: Optional[SimConfig] = None, reward_mode: str = "delta",
                      with_images: bool = False) -> TransitionBatch:
    """
    把状态/动作序列展开为 (s, o, a, s', o', r, d) 元组

    Args:
        task_id: 任务ID
        states: 长度 T+1 的状态序列
        actions: 长度 T 的动作序列
        variant: 任务变体
        sim_config: 仿真配置
        reward_mode: delta 或 absolute
        with_images: 是否渲染图像观测
    """
    config = sim_config or SimConfig()
    reward = RewardFunction(task_id, variant, states[0], config, reward_mode)
    horizon = len(actions)
    obs = np.stack([state_observation(task_id, s, variant, config) for s in states])
    images = None
    if with_images:
        images = np.stack([image_observation(task_id, s, variant, config) for s in states])
    return TransitionBatch(
        states=np.stack([s.particles for s in states[:-1]]).astype(np.float32),
        next_states=np.stack([s.particles for s in states[1:]]).astype(np.float32),
        observations=obs[:-1],
        next_observations=obs[1:],
        actions=np.stack([a.to_vector() for a in actions]).astype(np.float32),
        rewards=np.array([reward(states[t], states[t + 1]) for t in range(horizon)], dtype=np.float32),
        dones=np.array([t == horizon - 1 for t in range(horizon)], dtype=np.float32),
        images=images[:-1] if images is not None else None,
        next_images=images[1:] if images is not None else None,
    )
