"""
动力学模型结构与训练配置
"""
import enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class ArchVariant(enum.Enum):
    """结构变体"""
    CONV1D_RECURRENT = "conv1d_recurrent"   # 一维卷积 + LSTM（默认）
    RECURRENT_ONLY = "recurrent_only"       # 无卷积
    CONV1D_ONLY = "conv1d_only"             # 无循环
    MLP_BASELINE = "mlp_baseline"           # 逐粒子全连接


class ArchConfig(BaseModel):
    """时空动力学网络结构"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: ArchVariant = ArchVariant.CONV1D_RECURRENT
    conv_layers: int = 4
    channels: int = 32
    kernel: int = 3
    first_stride: int = 2
    stride: int = 1
    recurrent_hidden: int = 32
    head_hidden: int = 32
    leaky_slope: float = 0.01
    # 输出位移尺度，None 表示取动作空间对角线长度
    output_scale: Optional[float] = None

    @field_validator("variant", mode="before")
    @classmethod
    def _parse_variant(cls, value):
        return ArchVariant(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check(self):
        for name in ("conv_layers", "channels", "kernel", "first_stride", "stride", "recurrent_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"arch.{name} must be at least 1")
        if self.kernel % 2 == 0:
            raise ValueError("arch.kernel must be odd")
        if self.output_scale is not None and self.output_scale <= 0:
            raise ValueError("arch.output_scale must be positive")
        return self

    @property
    def uses_conv(self) -> bool:
        return self.variant in (ArchVariant.CONV1D_RECURRENT, ArchVariant.CONV1D_ONLY)

    @property
    def uses_recurrence(self) -> bool:
        return self.variant in (ArchVariant.CONV1D_RECURRENT, ArchVariant.RECURRENT_ONLY)

    def descriptor(self) -> dict:
        data = self.model_dump()
        data["variant"] = self.variant.value
        return data


class DynamicsTrainConfig(BaseModel):
    """动力学训练配置"""

    model_config = ConfigDict(extra="forbid")

    lr: float = 1e-5
    batch_size: int = 128
    epochs: int = 50
    optimizer: str = "sgd"
    momentum: float = 0.0
    heldout_fraction: float = 0.1
    grad_clip: Optional[float] = None
    # 随机动作数据集大小（转移数）
    k_r: int = 2000
    # 随机放置点相对拾取点的范围（米），None 表示整个动作空间
    random_place_radius: Optional[float] = 0.3

    @model_validator(mode="after")
    def _check(self):
        if self.lr <= 0:
            raise ValueError("dynamics.lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.k_r < 1:
            raise ValueError("dynamics.batch_size and dynamics.k_r must be >= 1, dynamics.epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"dynamics.optimizer must be sgd or adam, got {self.optimizer}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("dynamics.momentum must lie in [0, 1)")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValueError("dynamics.heldout_fraction must lie in (0, 1)")
        return self
