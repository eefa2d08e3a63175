"""
时空动力学模型
输入粒子位置序列与拾取-放置动作，输出每个粒子的位移
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import tensor as T
from autodiff.layers import Conv1d, LayerNorm, Linear, LSTMCell, Module
from autodiff.tensor import Tensor, no_grad
from dynamics.arch import ArchConfig, ArchVariant
from errors import ShapeMismatchError, SimulationDivergenceError
from sim.state import ParticleState, PickPlaceAction
from tasks.spaces import TaskId, get_task_space, parse_task_id
from utils.seeding import derive_rng

logger = logging.getLogger(__name__)

# 推理时的批大小上限（控制内存）
INFERENCE_CHUNK = 256
# 粒子与拾取点接近程度特征的尺度（米）
PROXIMITY_RADIUS = 0.05


class DynamicsNetwork(Module):
    """
    网络结构：
      逐粒子特征 -> 一维卷积（沿粒子轴）-> 均值池化 + 动作 -> LSTM
      -> 卷积特征最近邻上采样回 N -> FC + LayerNorm + tanh -> FC -> tanh * scale
    """

    def __init__(self, arch: ArchConfig, num_particles: int, num_pickers: int, rng: np.random.Generator):
        self.arch = arch
        self.num_particles = num_particles
        self.num_pickers = num_pickers
        features = 3 + 7 * num_pickers
        action_dim = 6 * num_pickers
        channels = arch.channels

        if arch.uses_conv:
            self.convs = [
                Conv1d(features if i == 0 else channels, channels, arch.kernel,
                       arch.first_stride if i == 0 else arch.stride, arch.kernel // 2, rng)
                for i in range(arch.conv_layers)
            ]
            length = num_particles
            for conv in self.convs:
                length = (length + 2 * conv.padding - conv.kernel) // conv.stride + 1
            self.conv_length = length
        else:
            self.encoder = Linear(features, channels, rng)
            self.conv_length = num_particles

        if arch.variant == ArchVariant.MLP_BASELINE:
            self.encoder = Linear(features + action_dim, channels, rng)
            context = 0
        elif arch.uses_recurrence:
            self.cell = LSTMCell(channels + action_dim, arch.recurrent_hidden, rng)
            context = arch.recurrent_hidden
        else:
            self.context = Linear(channels + action_dim, arch.recurrent_hidden, rng)
            context = arch.recurrent_hidden

        self.head_in = Linear(channels + context + features, arch.head_hidden, rng)
        self.head_norm = LayerNorm(arch.head_hidden)
        self.head_out = Linear(arch.head_hidden, 3, rng, zero_init=True)

    def initial_state(self, batch: int, dtype=np.float32):
        if self.arch.uses_recurrence:
            return self.cell.initial_state(batch, dtype)
        return None

    def forward(self, features: Tensor, action: Tensor, state, scale: float):
        """
        单步前向

        Args:
            features: (B, N, F) 逐粒子特征
            action: (B, 6m) 归一化动作
            state: LSTM 状态或 None
            scale: 输出位移尺度

        Returns:
            (位移 (B, N, 3), 新状态)
        """
        batch, count, _ = features.shape
        slope = self.arch.leaky_slope
        spread = np.ones((1, count, 1), dtype=features.dtype)

        if self.arch.variant == ArchVariant.MLP_BASELINE:
            tiled = T.reshape(action, (batch, 1, action.shape[-1])) * spread
            hidden = T.leaky_relu(self.encoder(T.concat([features, tiled], axis=-1)), slope)
            head_input = T.concat([hidden, features], axis=-1)
            next_state = None
        else:
            if self.arch.uses_conv:
                hidden = features
                for conv in self.convs:
                    hidden = T.leaky_relu(conv(hidden), slope)
                # 最近邻上采样回 N 个粒子
                index = (np.arange(count) * self.conv_length) // count
                per_particle = hidden[:, index, :]
            else:
                hidden = T.leaky_relu(self.encoder(features), slope)
                per_particle = hidden
            pooled = T.mean(hidden, axis=1)
            joint = T.concat([pooled, action], axis=-1)
            if self.arch.uses_recurrence:
                h, c = self.cell(joint, state)
                context, next_state = h, (h, c)
            else:
                context, next_state = T.leaky_relu(self.context(joint), slope), None
            tiled = T.reshape(context, (batch, 1, context.shape[-1])) * spread
            head_input = T.concat([per_particle, tiled, features], axis=-1)

        hidden = T.tanh(self.head_norm(self.head_in(head_input)))
        displacement = T.tanh(self.head_out(hidden)) * scale
        return displacement, next_state


@dataclass
class DynamicsParams:
    """模型参数：扁平参数向量 + 结构描述 + 训练元数据"""

    arch: ArchConfig
    task_id: TaskId
    num_particles: int
    num_pickers: int
    vector: np.ndarray = field(repr=False)
    metadata: Dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {
            "arch": self.arch.descriptor(),
            "task_id": self.task_id.value,
            "num_particles": self.num_particles,
            "num_pickers": self.num_pickers,
            "num_parameters": int(self.vector.size),
        }


class DynamicsModel:
    """网络 + 输入归一化；推理为纯函数，可在多个线程共享只读参数"""

    def __init__(self, task_id, arch: ArchConfig, num_particles: int, num_pickers: int, seed: int = 0):
        self.task_id = parse_task_id(task_id)
        self.space = get_task_space(self.task_id)
        self.arch = arch
        self.num_particles = num_particles
        self.num_pickers = num_pickers
        self.network = DynamicsNetwork(arch, num_particles, num_pickers, derive_rng(seed, 0xD1))
        self.scale = arch.output_scale if arch.output_scale is not None else self.space.action_diagonal
        low = np.asarray(self.space.action_low, dtype=np.float64)
        high = np.asarray(self.space.action_high, dtype=np.float64)
        self.center = (low + high) / 2.0
        self.half_extent = (high - low) / 2.0
        self.diagonal = self.space.action_diagonal
        self.metadata: Dict = {}

    # ------------------------------------------------------------------
    # 参数
    # ------------------------------------------------------------------
    @classmethod
    def from_params(cls, params: DynamicsParams) -> "DynamicsModel":
        model = cls(params.task_id, params.arch, params.num_particles, params.num_pickers)
        if params.vector.size != model.network.num_parameters:
            raise ShapeMismatchError(
                f"Parameter vector has {params.vector.size} entries, architecture needs {model.network.num_parameters}"
            )
        model.network.load_vector(params.vector)
        model.metadata = dict(params.metadata)
        return model

    def to_params(self) -> DynamicsParams:
        return DynamicsParams(
            arch=self.arch,
            task_id=self.task_id,
            num_particles=self.num_particles,
            num_pickers=self.num_pickers,
            vector=self.network.state_vector().astype(np.float32),
            metadata=dict(self.metadata),
        )

    @property
    def dtype(self):
        return self.network.head_out.weight.dtype

    # ------------------------------------------------------------------
    # 输入特征
    # ------------------------------------------------------------------
    def _check(self, positions: np.ndarray, actions: np.ndarray) -> None:
        if positions.shape[-2:] != (self.num_particles, 3):
            raise ShapeMismatchError(
                f"Positions shape {positions.shape} incompatible with model of {self.num_particles} particles"
            )
        if actions.shape[-1] != 6 * self.num_pickers:
            raise ShapeMismatchError(
                f"Action dimension {actions.shape[-1]} incompatible with {self.num_pickers} pickers"
            )

    def features(self, positions: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            positions: (B, N, 3)
            actions: (B, 6m)

        Returns:
            逐粒子特征 (B, N, 3 + 7m)，归一化动作 (B, 6m)
        """
        pairs = actions.reshape(actions.shape[0], self.num_pickers, 6)
        picks, places = pairs[:, :, :3], pairs[:, :, 3:]
        radius = PROXIMITY_RADIUS
        parts = [(positions - self.center) / self.half_extent]
        for k in range(self.num_pickers):
            offset = positions - picks[:, None, k, :]
            distance = np.linalg.norm(offset, axis=-1, keepdims=True)
            move = np.broadcast_to((places[:, k] - picks[:, k])[:, None, :], positions.shape)
            parts.extend([offset / self.diagonal, move / self.diagonal, np.exp(-(distance / radius) ** 2)])
        normalized_action = ((pairs - np.tile(self.center, 2)) / np.tile(self.half_extent, 2)).reshape(actions.shape)
        dtype = self.dtype
        return np.concatenate(parts, axis=-1).astype(dtype), normalized_action.astype(dtype)

    # ------------------------------------------------------------------
    # 前向
    # ------------------------------------------------------------------
    def forward_sequence(self, positions: np.ndarray, actions: np.ndarray) -> Tensor:
        """
        教师强制的序列前向（训练用）

        Args:
            positions: (B, T, N, 3) 每步输入的真实粒子位置
            actions: (B, T, 6m)

        Returns:
            预测位移 Tensor (B, T, N, 3)
        """
        positions = np.asarray(positions)
        actions = np.asarray(actions)
        self._check(positions, actions)
        batch, steps = actions.shape[:2]
        state = self.network.initial_state(batch, self.dtype)
        outputs = []
        for t in range(steps):
            feats, act = self.features(positions[:, t], actions[:, t])
            displacement, state = self.network(Tensor(feats), Tensor(act), state, self.scale)
            outputs.append(displacement)
        return T.stack(outputs, axis=1)

    def predict_displacements(self, state_history: Sequence, actions: Sequence) -> np.ndarray:
        """
        按历史逐步推进循环状态，返回最后一步的位移

        Args:
            state_history: s_0..s_t（ParticleState 或 (N, 3) 数组）
            actions: a_0..a_t（PickPlaceAction 或 (6m,) 数组），长度与 state_history 相同

        Returns:
            (N, 3) 位移
        """
        if len(state_history) < 1:
            raise ShapeMismatchError("History must contain at least one state")
        if len(actions) != len(state_history):
            raise ShapeMismatchError(f"History has {len(state_history)} states but {len(actions)} actions")
        positions = np.stack([_positions(s) for s in state_history])[None]
        vectors = np.stack([_action_vector(a) for a in actions])[None]
        with no_grad():
            predicted = self.forward_sequence(positions, vectors).data
        return predicted[0, -1].astype(np.float64)

    def rollout_batch(self, positions0: np.ndarray, action_sequences: np.ndarray) -> np.ndarray:
        """
        批量开环预测

        Args:
            positions0: (N, 3) 或 (B, N, 3) 初始粒子位置
            action_sequences: (B, T, 6m)

        Returns:
            (B, T + 1, N, 3) 预测位置序列
        """
        action_sequences = np.asarray(action_sequences, dtype=np.float64)
        batch, steps = action_sequences.shape[:2]
        positions0 = np.asarray(positions0, dtype=np.float64)
        if positions0.ndim == 2:
            positions0 = np.broadcast_to(positions0, (batch,) + positions0.shape)
        self._check(positions0, action_sequences)
        result = np.empty((batch, steps + 1, self.num_particles, 3))
        result[:, 0] = positions0
        with no_grad():
            for start in range(0, batch, INFERENCE_CHUNK):
                stop = min(start + INFERENCE_CHUNK, batch)
                current = positions0[start:stop].copy()
                state = self.network.initial_state(stop - start, self.dtype)
                for t in range(steps):
                    feats, act = self.features(current, action_sequences[start:stop, t])
                    displacement, state = self.network(Tensor(feats), Tensor(act), state, self.scale)
                    current = current + displacement.data.astype(np.float64)
                    result[start:stop, t + 1] = current
        if not np.all(np.isfinite(result)):
            raise SimulationDivergenceError("Learned rollout produced non-finite positions")
        return result

    def rollout_learned(self, s0: ParticleState, action_sequence: Sequence[PickPlaceAction]) -> List[ParticleState]:
        """在学习到的动力学上开环推演，返回 len(actions)+1 个状态"""
        horizon = get_task_space(self.task_id).horizon
        if len(action_sequence) > horizon:
            raise ShapeMismatchError(
                f"Action sequence of length {len(action_sequence)} exceeds the {self.task_id.value} horizon {horizon}"
            )
        states = [s0]
        if not action_sequence:
            return states
        vectors = np.stack([_action_vector(a) for a in action_sequence])[None]
        predicted = self.rollout_batch(s0.particles, vectors)[0]
        for t, action in enumerate(action_sequence, start=1):
            places = action.places if isinstance(action, PickPlaceAction) else PickPlaceAction.from_vector(action).places
            states.append(ParticleState(
                particles=predicted[t],
                picker_positions=places,
                time_step=s0.time_step + t,
                task_id=s0.task_id,
            ))
        return states


def _positions(state) -> np.ndarray:
    return state.particles if isinstance(state, ParticleState) else np.asarray(state, dtype=np.float64)


def _action_vector(action) -> np.ndarray:
    return action.to_vector() if isinstance(action, PickPlaceAction) else np.asarray(action, dtype=np.float64)


def predict_displacements(params: DynamicsParams, state_history: Sequence, actions: Sequence) -> np.ndarray:
    return DynamicsModel.from_params(params).predict_displacements(state_history, actions)


def rollout_learned(params: DynamicsParams, s0: ParticleState,
                    action_sequence: Sequence[PickPlaceAction]) -> List[ParticleState]:
    return DynamicsModel.from_params(params).rollout_learned(s0, action_sequence)
