"""
仿真配置
"""
from typing import Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from config import read_key_value_file
from errors import ConfigError

Vec3 = Tuple[float, float, float]


def parse_vector(value):
    """把 "a,b,c" 形式的字符串解析为浮点元组"""
    if isinstance(value, str):
        cleaned = value.strip().strip("()[]")
        return tuple(float(part) for part in cleaned.split(",") if part.strip())
    return value


class SimConfig(BaseModel):
    """
    粒子仿真配置（SI 单位）

    发散判据：出现非有限值，或动能连续 divergence_window 个子步增长且最大粒子速度超过 max_speed
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # 布料离散化（完整规模 80x80，桌面默认 20x20）
    grid_w: int = 20
    grid_h: int = 20
    rest_length: float = 0.016

    # 材料与求解器（标定值）
    spring_stiffness: float = 1.0
    damping: float = 0.02
    gravity: float = 9.81
    dt: float = 0.02
    solver_iterations: int = 8
    substeps_per_macro_action: int = 30
    settle_steps: int = 200
    settle_tolerance: float = 1e-4
    stretch_cap: float = 1.1
    strain_iterations: int = 50

    # 拾取
    pick_radius: float = 0.05

    # 碰撞：地面与晾衣杆（轴对齐盒）
    ground_height: float = 0.0
    plank_min: Vec3 = (-0.02, 0.26, -0.45)
    plank_max: Vec3 = (0.02, 0.30, 0.45)
    collision_margin: float = 0.005
    contact_stick: float = 1.0

    # 发散检测
    # 速度低于 max_speed 的动能增长（例如自由落体）不计入
    divergence_window: int = 10
    max_speed: float = 50.0

    @field_validator("plank_min", "plank_max", mode="before")
    @classmethod
    def _parse_vec(cls, value):
        return parse_vector(value)

    @model_validator(mode="after")
    def _check_ranges(self):
        positive = {
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "rest_length": self.rest_length,
            "spring_stiffness": self.spring_stiffness,
            "damping": self.damping,
            "gravity": self.gravity,
            "dt": self.dt,
            "solver_iterations": self.solver_iterations,
            "substeps_per_macro_action": self.substeps_per_macro_action,
            "settle_steps": self.settle_steps,
            "settle_tolerance": self.settle_tolerance,
            "pick_radius": self.pick_radius,
            "collision_margin": self.collision_margin,
            "divergence_window": self.divergence_window,
            "max_speed": self.max_speed,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"sim.{name} must be strictly positive, got {value}")
        if self.grid_w < 2 or self.grid_h < 2:
            raise ValueError("cloth grid must be at least 2x2")
        if self.spring_stiffness > 1.0:
            raise ValueError("sim.spring_stiffness must lie in (0, 1]")
        if self.damping >= 1.0:
            raise ValueError("sim.damping must lie in (0, 1)")
        if not 0.0 <= self.contact_stick <= 1.0:
            raise ValueError("sim.contact_stick must lie in [0, 1]")
        if self.stretch_cap <= 1.0:
            raise ValueError("sim.stretch_cap must exceed 1")
        if any(lo >= hi for lo, hi in zip(self.plank_min, self.plank_max)):
            raise ValueError("sim.plank_min must be below sim.plank_max on every axis")
        return self

    @classmethod
    def from_file(cls, path: str) -> "SimConfig":
        """
        从 key=value 文件加载，键可带或不带 "sim." 前缀

        Args:
            path: 配置文件路径
        """
        values = {}
        for key, value in read_key_value_file(path).items():
            if "." in key:
                namespace, _, name = key.partition(".")
                if namespace != "sim":
                    continue
                key = name
            values[key] = value
        try:
            return cls.model_validate(values)
        except Exception as e:
            raise ConfigError(f"Invalid sim config in {path}: {e}")
