"""
回放缓冲区
预先放入学生数据集；演示元组受保护，满了以后先按 FIFO 淘汰非演示元组
"""
from collections import deque
from typing import Optional, Tuple

import numpy as np

from errors import EmptyDatasetError, ShapeMismatchError
from lfd.losses import Batch

_INITIAL_SLOTS = 1024


class ReplayBuffer:
    """
    环形缓冲区（按需扩容到 capacity）

    字段：状态观测、可选图像、动作、奖励、下一状态观测、下一图像、终止标志、演示标志
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int,
                 image_shape: Optional[Tuple[int, int, int]] = None):
        if capacity < 1:
            raise ValueError(f"Buffer capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.image_shape = image_shape
        self.size = 0
        slots = min(capacity, _INITIAL_SLOTS)
        self.observations = np.zeros((slots, obs_dim), dtype=np.float32)
        self.next_observations = np.zeros((slots, obs_dim), dtype=np.float32)
        self.actions = np.zeros((slots, act_dim), dtype=np.float32)
        self.rewards = np.zeros(slots, dtype=np.float32)
        self.dones = np.zeros(slots, dtype=np.float32)
        self.is_demo = np.zeros(slots, dtype=bool)
        self.images = np.zeros((slots,) + image_shape, dtype=np.float32) if image_shape else None
        self.next_images = np.zeros((slots,) + image_shape, dtype=np.float32) if image_shape else None
        # 按插入顺序记录的槽位
        self._demo_slots: deque = deque()
        self._online_slots: deque = deque()

    def __len__(self) -> int:
        return self.size

    @property
    def demo_count(self) -> int:
        return len(self._demo_slots)

    def _fields(self):
        names = ["observations", "next_observations", "actions", "rewards", "dones", "is_demo"]
        if self.image_shape:
            names += ["images", "next_images"]
        return names

    def _grow(self) -> None:
        slots = min(self.capacity, 2 * len(self.rewards))
        for name in self._fields():
            old = getattr(self, name)
            new = np.zeros((slots,) + old.shape[1:], dtype=old.dtype)
            new[:len(old)] = old
            setattr(self, name, new)

    def _next_slot(self) -> int:
        if self.size < self.capacity:
            if self.size == len(self.rewards):
                self._grow()
            self.size += 1
            return self.size - 1
        if self._online_slots:
            return self._online_slots.popleft()
        return self._demo_slots.popleft()

    def add(self, observation, action, reward: float, next_observation, done: bool, demo: bool = False,
            image=None, next_image=None) -> int:
        """写入一个元组，返回槽位"""
        if np.shape(observation) != (self.obs_dim,) or np.shape(action) != (self.act_dim,):
            raise ShapeMismatchError(
                f"Tuple shapes {np.shape(observation)}/{np.shape(action)} do not match buffer "
                f"({self.obs_dim},)/({self.act_dim},)"
            )
        slot = self._next_slot()
        self.observations[slot] = observation
        self.next_observations[slot] = next_observation
        self.actions[slot] = action
        self.rewards[slot] = reward
        self.dones[slot] = float(done)
        self.is_demo[slot] = demo
        if self.image_shape:
            self.images[slot] = image
            self.next_images[slot] = next_image
        (self._demo_slots if demo else self._online_slots).append(slot)
        return slot

    def add_batch(self, observations, actions, rewards, next_observations, dones, demo: bool = False,
                  images=None, next_images=None) -> None:
        for i in range(len(actions)):
            self.add(
                observations[i], actions[i], float(rewards[i]), next_observations[i], bool(dones[i] > 0.5), demo,
                images[i] if images is not None else None,
                next_images[i] if next_images is not None else None,
            )

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """在整个缓冲区上均匀有放回采样"""
        if self.size == 0:
            raise EmptyDatasetError("Cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, Batch]:
        """
        Returns:
            (槽位, Batch)；actor_inputs 在图像模式下为图像，否则为状态观测
        """
        idx = self.sample_indices(batch_size, rng)
        uses_images = self.image_shape is not None
        return idx, Batch(
            observations=self.observations[idx],
            actor_inputs=self.images[idx] if uses_images else self.observations[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_observations=self.next_observations[idx],
            next_actor_inputs=self.next_images[idx] if uses_images else self.next_observations[idx],
            dones=self.dones[idx],
        )
