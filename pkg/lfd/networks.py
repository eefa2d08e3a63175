"""
策略与价值网络
tanh 压缩的高斯策略、双 Q 评论家、图像编码器，以及参数打包
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from autodiff import tensor as T
from autodiff.layers import Conv2d, Linear, MLP, Module
from autodiff.tensor import Tensor, no_grad
from errors import ShapeMismatchError
from lfd.settings import LfdConfig
from sim.settings import SimConfig
from sim.state import IMAGE_SIZE, ParticleState, PickPlaceAction
from tasks.observations import image_observation, state_observation
from tasks.spaces import TaskId, get_task_space, parse_task_id
from tasks.variants import TaskVariant
from utils.seeding import derive_rng

_LOG_2PI = math.log(2.0 * math.pi)
# 数据动作反 tanh 前的截断
_ATANH_EPS = 1e-6


def _leaky(slope: float):
    return lambda x: T.leaky_relu(x, slope)


class ImageEncoder(Module):
    """4 层卷积（无填充）+ 全连接 + tanh"""

    def __init__(self, config: LfdConfig, rng: np.random.Generator, image_size: int = IMAGE_SIZE):
        self.slope = config.leaky_slope
        self.convs = []
        channels = 3
        size = image_size
        for _ in range(config.image_layers):
            self.convs.append(Conv2d(channels, config.image_channels, 3, 1, 0, rng))
            channels = config.image_channels
            size -= 2
        if size < 1:
            raise ShapeMismatchError(f"{config.image_layers} conv layers do not fit a {image_size}px image")
        self.flat = size * size * channels
        self.fc = Linear(self.flat, config.image_feature, rng)
        self.feature = config.image_feature

    def forward(self, images: Tensor) -> Tensor:
        x = images
        for conv in self.convs:
            x = T.leaky_relu(conv(x), self.slope)
        return T.tanh(self.fc(x.reshape(x.shape[0], self.flat)))


def random_crop(images: np.ndarray, padding: int, rng: np.random.Generator) -> np.ndarray:
    """边缘填充后随机裁剪回原尺寸"""
    if padding <= 0:
        return images
    batch, height, width, _ = images.shape
    padded = np.pad(images, ((0, 0), (padding, padding), (padding, padding), (0, 0)), mode="edge")
    offsets = rng.integers(0, 2 * padding + 1, size=(batch, 2))
    return np.stack([
        padded[i, dy:dy + height, dx:dx + width] for i, (dy, dx) in enumerate(offsets)
    ])


class TanhGaussianActor(Module):
    """
    高斯策略，采样后经 tanh 压缩并缩放到动作边界

    对数概率按缩放后的动作计算（包含 tanh 与缩放的雅可比项）
    """

    def __init__(self, obs_dim: int, low: np.ndarray, high: np.ndarray, config: LfdConfig,
                 rng: np.random.Generator, encoder: Optional[ImageEncoder] = None):
        self.encoder = encoder
        self.act_dim = len(low)
        self.center = (np.asarray(high, dtype=np.float64) + np.asarray(low, dtype=np.float64)) / 2.0
        self.half = (np.asarray(high, dtype=np.float64) - np.asarray(low, dtype=np.float64)) / 2.0
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.log_std_min = config.log_std_min
        self.log_std_max = config.log_std_max
        in_dim = encoder.feature if encoder is not None else obs_dim
        sizes = [in_dim] + [config.hidden_width] * config.hidden_layers + [2 * self.act_dim]
        self.body = MLP(sizes, rng, activation=_leaky(config.leaky_slope))

    def forward(self, inputs: Tensor) -> Tuple[Tensor, Tensor]:
        """返回压缩前高斯分布的 (mean, log_std)"""
        features = self.encoder(inputs) if self.encoder is not None else inputs
        out = self.body(features)
        mean = out[..., :self.act_dim]
        raw = out[..., self.act_dim:]
        span = self.log_std_max - self.log_std_min
        log_std = self.log_std_min + 0.5 * span * (T.tanh(raw) + 1.0)
        return mean, log_std

    def _log_jacobian(self) -> float:
        return float(np.sum(np.log(self.half)))

    def sample(self, inputs: Tensor, rng: Optional[np.random.Generator] = None,
               noise: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """
        重参数化采样

        Returns:
            (动作 (B, A)，对数概率 (B,))
        """
        mean, log_std = self(inputs)
        if noise is None:
            noise = (rng or np.random.default_rng()).standard_normal(mean.shape)
        noise = np.asarray(noise, dtype=mean.dtype)
        z = mean + T.exp(log_std) * noise
        squashed = T.tanh(z)
        gaussian = T.tsum(-0.5 * noise * noise - log_std, axis=-1) - 0.5 * self.act_dim * _LOG_2PI
        # log(1 - tanh(z)^2) = 2 (log 2 - z - softplus(-2 z))
        correction = T.tsum(2.0 * (math.log(2.0) - z - T.softplus(-2.0 * z)), axis=-1)
        action = self.center.astype(mean.dtype) + squashed * self.half.astype(mean.dtype)
        return action, gaussian - correction - self._log_jacobian()

    def log_prob(self, inputs: Tensor, actions: np.ndarray) -> Tensor:
        """给定动作（例如演示动作）的对数概率；梯度只流向均值与标准差"""
        mean, log_std = self(inputs)
        squashed = np.clip((np.asarray(actions, dtype=np.float64) - self.center) / self.half,
                           -1.0 + _ATANH_EPS, 1.0 - _ATANH_EPS)
        z = np.arctanh(squashed).astype(mean.dtype)
        standardized = (z - mean) / T.exp(log_std)
        gaussian = T.tsum(-0.5 * standardized * standardized - log_std, axis=-1) - 0.5 * self.act_dim * _LOG_2PI
        correction = np.sum(np.log(1.0 - squashed ** 2), axis=-1).astype(mean.dtype)
        return gaussian - correction - self._log_jacobian()

    def mean_action(self, inputs: Tensor) -> np.ndarray:
        """确定性动作 center + half · tanh(mean)"""
        with no_grad():
            mean, _ = self(inputs)
        return np.clip(self.center + self.half * np.tanh(mean.data.astype(np.float64)), self.low, self.high)


class TwinCritic(Module):
    """双 Q 网络；动作先归一化到 [-1, 1]"""

    def __init__(self, state_dim: int, low: np.ndarray, high: np.ndarray, config: LfdConfig,
                 rng: np.random.Generator):
        self.center = (np.asarray(high, dtype=np.float64) + np.asarray(low, dtype=np.float64)) / 2.0
        self.half = (np.asarray(high, dtype=np.float64) - np.asarray(low, dtype=np.float64)) / 2.0
        sizes = [state_dim + len(low)] + [config.hidden_width] * config.hidden_layers + [1]
        self.q1 = MLP(sizes, rng, activation=_leaky(config.leaky_slope))
        self.q2 = MLP(sizes, rng, activation=_leaky(config.leaky_slope))

    def forward(self, states: Tensor, actions) -> Tuple[Tensor, Tensor]:
        actions = T.as_tensor(actions, states.dtype)
        normalized = (actions - self.center.astype(states.dtype)) / self.half.astype(states.dtype)
        inputs = T.concat([states, normalized], axis=-1)
        return self.q1(inputs).reshape(-1), self.q2(inputs).reshape(-1)

    def min_q(self, states: Tensor, actions) -> Tensor:
        q1, q2 = self(states, actions)
        return T.minimum(q1, q2)


def polyak_update(target: Module, source: Module, rate: float) -> None:
    """target ← (1 − rate) · target + rate · source"""
    target.load_vector((1.0 - rate) * target.state_vector() + rate * source.state_vector())


@dataclass
class PolicyParams:
    """策略参数；图像编码器的参数包含在 actor 向量中"""

    task_id: TaskId
    num_pickers: int
    obs_dim: int
    config: LfdConfig
    actor: np.ndarray = field(repr=False)
    critic: np.ndarray = field(repr=False)
    target_critic: np.ndarray = field(repr=False)
    metadata: Dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {
            "task_id": self.task_id.value,
            "num_pickers": self.num_pickers,
            "obs_dim": self.obs_dim,
            "lfd": self.config.descriptor(),
        }


class Policy:
    """actor + 双 Q 评论家 + 目标评论家"""

    def __init__(self, task_id, num_pickers: int, obs_dim: int, config: Optional[LfdConfig] = None,
                 seed: int = 0, dtype=np.float32):
        self.task_id = parse_task_id(task_id)
        self.space = get_task_space(self.task_id)
        self.num_pickers = num_pickers
        self.obs_dim = obs_dim
        self.config = config or LfdConfig()
        self.low, self.high = self.space.action_bounds(num_pickers)
        rng = derive_rng(seed, 0xAC)
        encoder = ImageEncoder(self.config, rng) if self.config.uses_images else None
        self.actor = TanhGaussianActor(obs_dim, self.low, self.high, self.config, rng, encoder)
        self.critic = TwinCritic(obs_dim, self.low, self.high, self.config, rng)
        self.target_critic = TwinCritic(obs_dim, self.low, self.high, self.config, rng)
        for module in (self.actor, self.critic, self.target_critic):
            module.astype(dtype)
        self.target_critic.copy_from(self.critic)
        self.metadata: Dict = {}

    @property
    def dtype(self):
        return self.actor.body.layers[0].weight.dtype

    @classmethod
    def from_params(cls, params: PolicyParams) -> "Policy":
        policy = cls(params.task_id, params.num_pickers, params.obs_dim, params.config)
        policy.actor.load_vector(params.actor)
        policy.critic.load_vector(params.critic)
        policy.target_critic.load_vector(params.target_critic)
        policy.metadata = dict(params.metadata)
        return policy

    def to_params(self) -> PolicyParams:
        return PolicyParams(
            task_id=self.task_id,
            num_pickers=self.num_pickers,
            obs_dim=self.obs_dim,
            config=self.config,
            actor=self.actor.state_vector().astype(np.float32),
            critic=self.critic.state_vector().astype(np.float32),
            target_critic=self.target_critic.state_vector().astype(np.float32),
            metadata=dict(self.metadata),
        )

    def actor_input(self, state: ParticleState, variant: Optional[TaskVariant],
                    sim_config: Optional[SimConfig] = None) -> np.ndarray:
        if self.config.uses_images:
            return image_observation(self.task_id, state, variant, sim_config)
        return state_observation(self.task_id, state, variant, sim_config)

    def act(self, actor_input: np.ndarray, deterministic: bool = True,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """单个观测到 (6m,) 动作"""
        inputs = Tensor(np.asarray(actor_input, dtype=self.dtype)[None])
        if deterministic:
            return self.actor.mean_action(inputs)[0]
        with no_grad():
            action, _ = self.actor.sample(inputs, rng)
        return np.clip(action.data[0].astype(np.float64), self.low, self.high)

    def controller(self, sim_config: Optional[SimConfig] = None, deterministic: bool = True,
                   rng: Optional[np.random.Generator] = None):
        """包装成 (state, t, variant) -> PickPlaceAction 的控制器"""

        def control(state: ParticleState, t: int, variant: Optional[TaskVariant]) -> PickPlaceAction:
            vector = self.act(self.actor_input(state, variant, sim_config), deterministic, rng)
            return PickPlaceAction.from_vector(vector)

        return control
