# pipeline/settings.py
"""
实验配置
优先级：模型默认值（完整规模） < 预设 < 配置文件 < 命令行 < 环境变量 MORPHADAPT_OUT
"""
import hashlib
import json
import logging
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import fold_dotted, merge_nested, read_key_value_file, settings
from dynamics.arch import ArchConfig, ArchVariant, DynamicsTrainConfig
from errors import ConfigError
from lfd.settings import LfdConfig
from sim.settings import SimConfig
from tasks.spaces import TaskId, get_task_space, parse_task_id
from trajopt.optimizers import OptimizerConfig
from trajopt.presets import CemPresets, PresetScale

logger = logging.getLogger(__name__)

# 流水线阶段（顺序执行）
STAGES = ("gen-teacher", "gen-random", "train-dynamics", "build-student", "train-lfd", "evaluate")

# 每个阶段新增的配置段；阶段指纹包含它和之前所有阶段的配置段
STAGE_SECTIONS = {
    "gen-teacher": ("task", "teacher_morphology", "k_t", "seed", "sim"),
    "gen-random": ("student_morphology", "dynamics"),
    "train-dynamics": ("arch",),
    "build-student": ("optimizer", "with_images"),
    "train-lfd": ("lfd",),
    "evaluate": ("eval_rollouts",),
}


def _split_list(value):
    if isinstance(value, str):
        return [part.strip() for part in value.strip().strip("[]").split(",") if part.strip()]
    return value


class AblationConfig(BaseModel):
    """消融实验配置"""

    model_config = ConfigDict(extra="forbid")

    # 每个条件使用的任务变体数
    variants: int = 20
    # ABL4：学生数据集中优化轨迹所占比例（其余为单执行器脚本演示）
    mix_fractions: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0])
    # ABL5：开启时的 RSI-IR 概率
    rsi_probability: float = 0.3
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    architectures: List[ArchVariant] = Field(default_factory=lambda: list(ArchVariant))

    @field_validator("mix_fractions", "seeds", "architectures", mode="before")
    @classmethod
    def _parse_list(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check(self):
        if self.variants < 1:
            raise ValueError("ablation.variants must be at least 1")
        if not self.seeds:
            raise ValueError("ablation.seeds must not be empty")
        if not self.architectures:
            raise ValueError("ablation.architectures must not be empty")
        if any(not 0.0 <= f <= 1.0 for f in self.mix_fractions):
            raise ValueError("ablation.mix_fractions must lie in [0, 1]")
        if not 0.0 <= self.rsi_probability <= 1.0:
            raise ValueError("ablation.rsi_probability must lie in [0, 1]")
        return self


class ExperimentConfig(BaseModel):
    """一次完整实验的配置"""

    model_config = ConfigDict(extra="forbid")

    task: TaskId = TaskId.THREE_BOXES
    preset: PresetScale = PresetScale.FULL
    # 形态（执行器数量），None 取任务默认值
    teacher_morphology: Optional[int] = None
    student_morphology: Optional[int] = None
    k_t: int = 100
    seed: int = 0
    out: str = "runs"
    workers: int = 1
    with_images: bool = False
    # 最终评估回合数
    eval_rollouts: int = 100

    sim: SimConfig = Field(default_factory=SimConfig)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    dynamics: DynamicsTrainConfig = Field(default_factory=DynamicsTrainConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    lfd: LfdConfig = Field(default_factory=LfdConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @field_validator("task", mode="before")
    @classmethod
    def _parse_task(cls, value):
        return parse_task_id(value)

    @model_validator(mode="after")
    def _check(self):
        space = get_task_space(self.task)
        if self.k_t < 1:
            raise ValueError("k_t must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.eval_rollouts < 1:
            raise ValueError("eval_rollouts must be at least 1")
        teacher = self.teacher_pickers
        if teacher < 1 or (self.task != TaskId.THREE_BOXES and teacher not in (1, space.teacher_morphology)):
            raise ValueError(f"teacher_morphology {teacher} has no scripted teacher on {self.task.value}")
        if teacher > space.num_boxes and self.task == TaskId.THREE_BOXES:
            raise ValueError(f"teacher_morphology must not exceed {space.num_boxes} on {self.task.value}")
        if not 1 <= self.student_pickers <= 3:
            raise ValueError("student_morphology must lie in [1, 3]")
        if self.lfd.uses_images and not self.with_images:
            raise ValueError("lfd.observation_mode=image needs with_images=true")
        return self

    @property
    def teacher_pickers(self) -> int:
        return self.teacher_morphology or get_task_space(self.task).teacher_morphology

    @property
    def student_pickers(self) -> int:
        return self.student_morphology or get_task_space(self.task).student_morphology

    def optimizer_for_run(self) -> OptimizerConfig:
        return self.optimizer.model_copy(update={"seed": self.seed, "workers": self.workers})

    def lfd_for_run(self, seed: Optional[int] = None) -> LfdConfig:
        return self.lfd.model_copy(update={"seed": self.seed if seed is None else seed, "workers": self.workers})

    def stage_hash(self, stage: str) -> str:
        """阶段指纹：该阶段及其上游用到的配置"""
        if stage not in STAGE_SECTIONS:
            raise ConfigError(f"Unknown stage: {stage}")
        data = self.model_dump(mode="json")
        data["teacher_morphology"] = self.teacher_pickers
        data["student_morphology"] = self.student_pickers
        sections: Dict[str, Any] = {}
        for name in STAGES[:STAGES.index(stage) + 1]:
            for key in STAGE_SECTIONS[name]:
                sections[key] = data[key]
        for key in ("optimizer", "lfd"):
            if key in sections:
                sections[key] = {k: v for k, v in sections[key].items() if k != "workers"}
        # 学生数据集的奖励形式属于 build-student
        if STAGES.index(stage) >= STAGES.index("build-student"):
            sections["reward_mode"] = self.lfd.reward_mode
        return hashlib.sha256(json.dumps(sections, sort_keys=True).encode("utf-8")).hexdigest()

    def config_hash(self) -> str:
        return self.stage_hash(STAGES[-1])


class ExperimentPresets:
    """实验预设：full 为完整规模（模型默认值），desk 为单机规模"""

    # ============ 完整规模 ============
    FULL = {}

    # ============ 桌面规模 ============
    DESK = {
        'k_t': 20,
        'eval_rollouts': 20,
        'dynamics': {
            'k_r': 600,
            'optimizer': 'adam',        # SGD lr=1e-5 在小数据上几乎不动
            'lr': 1e-3,
            'epochs': 30,
            'batch_size': 32,
        },
        'lfd': {
            'hidden_width': 256,
            'image_feature': 256,
            'batch_size': 128,
            'buffer_capacity': 100000,
            'training_steps': 3000,
            'eval_interval': 500,
            'eval_rollouts': 10,
        },
        'ablation': {
            'variants': 20,
            'seeds': [0, 1, 2],
        },
    }

    @classmethod
    def get_preset(cls, scale: PresetScale, task_id) -> Dict[str, Any]:
        """获取预设（嵌套字典），优化器预算按任务默认行和规模取值"""
        scale = PresetScale(scale)
        values = json.loads(json.dumps(cls.DESK if scale == PresetScale.DESK else cls.FULL))
        optimizer = CemPresets.for_task(task_id, scale)
        values['optimizer'] = optimizer.model_dump(mode="json")
        values['preset'] = scale.value
        return values


def _error_key(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first.get("loc", ())) or "<root>"


def build_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """校验嵌套字典，pydantic 错误转换为 ConfigError"""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        message = e.errors()[0].get("msg", str(e))
        raise ConfigError(f"Invalid config key '{_error_key(e)}': {message}") from e
    except (ValueError, TypeError) as e:
        raise ConfigError(f"Invalid config: {e}") from e


def load_experiment_config(preset: Optional[str] = None, config_file: Optional[str] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    加载实验配置

    Args:
        preset: desk、full 或 paper（full 的别名）；为空时取配置文件中的 preset，再为空取 full
        config_file: key=value 配置文件
        overrides: 命令行覆盖项（扁平的点号键）

    Returns:
        ExperimentConfig
    """
    file_values = fold_dotted(read_key_value_file(config_file)) if config_file else {}
    cli_values = fold_dotted({k: v for k, v in (overrides or {}).items() if v is not None})

    scale_name = preset or cli_values.get("preset") or file_values.get("preset") or PresetScale.FULL.value
    try:
        scale = PresetScale(scale_name)
    except ValueError as e:
        raise ConfigError(f"Invalid config key 'preset': unknown preset {scale_name!r}") from e
    task = cli_values.get("task") or file_values.get("task") or TaskId.THREE_BOXES
    try:
        task_id = parse_task_id(task)
    except Exception as e:
        raise ConfigError(f"Invalid config key 'task': {e}") from e

    data = merge_nested(ExperimentPresets.get_preset(scale, task_id), file_values)
    data = merge_nested(data, cli_values)
    data["preset"] = scale.value
    if settings.out:
        data["out"] = settings.out

    config = build_experiment_config(data)
    logger.info(
        f"Experiment config: task={config.task.value}, preset={config.preset.value}, "
        f"n={config.teacher_pickers}, m={config.student_pickers}, seed={config.seed}, out={config.out}"
    )
    return config
