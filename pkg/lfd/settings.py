"""
示教学习配置
"""
import enum

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from tasks.observations import REWARD_MODES


class ObservationMode(enum.Enum):
    STATE = "state"
    IMAGE = "image"


class LfdConfig(BaseModel):
    """演示引导的 actor-critic 配置"""

    model_config = ConfigDict(extra="forbid")

    gamma: float = 0.9
    # 策略损失中熵项的权重 w_E
    entropy_weight: float = 0.1
    # 熵系数 α
    entropy_coefficient: float = 0.5
    # 优势温度 λ 与指数上限（经验值）
    advantage_temperature: float = 1.0
    advantage_clip: float = 20.0
    batch_size: int = 256
    buffer_capacity: int = 600000
    rsi_ir_probability: float = 0.0
    # 模仿奖励 w_IR · exp(-‖s' - s_demo‖² / σ²)
    imitation_weight: float = 1.0
    imitation_sigma: float = 0.1
    observation_mode: ObservationMode = ObservationMode.STATE
    reward_mode: str = "delta"

    # 网络
    hidden_width: int = 1024
    hidden_layers: int = 2
    leaky_slope: float = 0.01
    image_channels: int = 32
    image_layers: int = 4
    image_feature: int = 1024
    crop_padding: int = 2
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    # 训练
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    target_update_rate: float = 0.005
    value_samples: int = 4
    training_steps: int = 50000
    # 每隔多少次梯度更新执行一个环境回合
    rollout_interval: int = 10
    eval_interval: int = 1000
    eval_rollouts: int = 10
    seed: int = 0
    workers: int = 1

    @field_validator("observation_mode", mode="before")
    @classmethod
    def _parse_mode(cls, value):
        return ObservationMode(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 <= self.entropy_weight <= 1.0:
            raise ValueError("lfd.entropy_weight must lie in [0, 1]")
        if not 0.0 <= self.rsi_ir_probability <= 1.0:
            raise ValueError("lfd.rsi_ir_probability must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("lfd.gamma must lie in [0, 1]")
        if self.entropy_coefficient < 0:
            raise ValueError("lfd.entropy_coefficient must be non-negative")
        if self.advantage_temperature <= 0 or self.advantage_clip <= 0:
            raise ValueError("lfd.advantage_temperature and lfd.advantage_clip must be positive")
        if self.imitation_sigma <= 0:
            raise ValueError("lfd.imitation_sigma must be positive")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"lfd.reward_mode must be one of {REWARD_MODES}")
        if not 0.0 < self.target_update_rate <= 1.0:
            raise ValueError("lfd.target_update_rate must lie in (0, 1]")
        if self.log_std_min >= self.log_std_max:
            raise ValueError("lfd.log_std_min must be below lfd.log_std_max")
        for name in ("batch_size", "buffer_capacity", "hidden_width", "hidden_layers", "image_channels",
                     "image_layers", "image_feature", "value_samples", "rollout_interval",
                     "eval_interval", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"lfd.{name} must be at least 1")
        if self.training_steps < 0 or self.eval_rollouts < 0 or self.crop_padding < 0:
            raise ValueError("lfd.training_steps, lfd.eval_rollouts and lfd.crop_padding must be non-negative")
        return self

    @property
    def uses_images(self) -> bool:
        return self.observation_mode == ObservationMode.IMAGE

    def descriptor(self) -> dict:
        data = self.model_dump()
        data["observation_mode"] = self.observation_mode.value
        return data
