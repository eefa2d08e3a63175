"""
异常定义
所有模块共用的异常层级
"""


class MorphAdaptError(Exception):
    """基础异常"""


class ConfigError(MorphAdaptError):
    """配置无效"""


class UnknownTaskError(MorphAdaptError):
    """未知任务ID"""


class VariantError(MorphAdaptError):
    """任务变体超出任务分布范围"""


class ActionBoundsError(MorphAdaptError):
    """动作超出任务动作空间"""


class SimulationDivergenceError(MorphAdaptError):
    """仿真发散（NaN 或能量持续增长）"""


class TaskStateMismatchError(MorphAdaptError):
    """状态不属于该任务的状态空间"""


class MorphologyMismatchError(MorphAdaptError):
    """末端执行器数量不匹配"""


class DegenerateVariantError(MorphAdaptError):
    """p_opt 与初始性能相同，无法归一化"""


class TeacherQualityError(MorphAdaptError):
    """教师演示在重试上限内无法达到最低质量"""


class ShapeMismatchError(MorphAdaptError):
    """数组形状不匹配"""


class TrainingDivergenceError(MorphAdaptError):
    """训练损失出现 NaN"""


class EmptyDatasetError(MorphAdaptError):
    """数据集为空"""


class OptimizerError(MorphAdaptError):
    """轨迹优化器输入无效"""


class EmptyStatsError(MorphAdaptError):
    """没有可统计的样本"""


class ContainerError(MorphAdaptError):
    """数据集容器读写错误"""


class ManifestError(ContainerError):
    """清单文件损坏或缺失"""


class SchemaVersionError(ContainerError):
    """清单的 schema 版本不匹配"""


class ChecksumError(ContainerError):
    """数组文件校验和不匹配"""


class TruncatedArrayError(ContainerError):
    """数组文件长度与清单不一致"""


class StageError(MorphAdaptError):
    """流水线阶段失败"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")
