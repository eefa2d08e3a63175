# trajopt/presets.py
"""
轨迹优化参数预设
CEM 调参表的全部行、各任务默认行，以及桌面规模的缩放
"""

from enum import Enum
from typing import Any, Dict, Optional

from tasks.spaces import TaskId, parse_task_id
from trajopt.optimizers import OptimizerConfig, OptimizerMethod


class PresetScale(Enum):
    """预设规模"""
    FULL = "full"     # 完整预算，命令行也接受 paper
    DESK = "desk"     # 预算缩小 10 倍，适合单机快速运行

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.strip().lower() in PRESET_ALIASES:
            return cls(PRESET_ALIASES[value.strip().lower()])
        return None


# 预设别名 -> 规范名
PRESET_ALIASES = {"paper": "full"}


class CemPresets:
    """CEM 参数表"""

    # ============ 调参表（规划步长、迭代次数、推演预算） ============
    ROWS = {
        1: {'planning_horizon': 1, 'iterations': 2, 'env_interactions': 21000},
        2: {'planning_horizon': 2, 'iterations': 2, 'env_interactions': 15000},
        3: {'planning_horizon': 2, 'iterations': 2, 'env_interactions': 21000},
        4: {'planning_horizon': 2, 'iterations': 2, 'env_interactions': 31000},
        5: {'planning_horizon': 2, 'iterations': 2, 'env_interactions': 34000},
        6: {'planning_horizon': 2, 'iterations': 10, 'env_interactions': 21000},
        7: {'planning_horizon': 2, 'iterations': 1, 'env_interactions': 21000},
        8: {'planning_horizon': 2, 'iterations': 1, 'env_interactions': 15000},
        9: {'planning_horizon': 2, 'iterations': 1, 'env_interactions': 32000},
        10: {'planning_horizon': 3, 'iterations': 2, 'env_interactions': 21000},
        11: {'planning_horizon': 3, 'iterations': 10, 'env_interactions': 21000},
        12: {'planning_horizon': 4, 'iterations': 2, 'env_interactions': 21000},
        13: {'planning_horizon': 4, 'iterations': 10, 'env_interactions': 21000},
    }

    # ============ 各任务默认行 ============
    # ThreeBoxes 需要 3 步才能放好三个箱子
    TASK_DEFAULT_ROW = {
        TaskId.THREE_BOXES: 10,
        TaskId.CLOTH_FOLD: 3,
        TaskId.DRY_CLOTH: 3,
    }

    # 桌面规模预算除数
    DESK_INTERACTION_DIVISOR = 10

    @classmethod
    def get_row(cls, row: int) -> Dict[str, Any]:
        """获取指定行的参数"""
        if row not in cls.ROWS:
            raise ValueError(f"Unknown CEM preset row {row}, expected 1..{len(cls.ROWS)}")
        return dict(cls.ROWS[row])

    @classmethod
    def default_row(cls, task_id) -> int:
        return cls.TASK_DEFAULT_ROW[parse_task_id(task_id)]

    @classmethod
    def scale_row(cls, values: Dict[str, Any], scale: PresetScale) -> Dict[str, Any]:
        values = dict(values)
        if scale == PresetScale.DESK:
            values['env_interactions'] = max(1, values['env_interactions'] // cls.DESK_INTERACTION_DIVISOR)
        return values

    @classmethod
    def for_task(cls, task_id, scale: PresetScale = PresetScale.FULL, row: Optional[int] = None,
                 **overrides: Any) -> OptimizerConfig:
        """
        构造任务的优化配置

        Args:
            task_id: 任务ID
            scale: 预设规模
            row: 调参表行号，默认取任务默认行
            overrides: 其余 OptimizerConfig 字段

        Returns:
            OptimizerConfig
        """
        values = cls.scale_row(cls.get_row(row or cls.default_row(task_id)), PresetScale(scale))
        values.update(overrides)
        return OptimizerConfig(**values)


# ============ 消融用的优化器模板 ============

class QuickOptimizer:
    """同一预算下的优化器对比模板"""

    RANDOM = {'method': OptimizerMethod.RANDOM}

    CMA_ES = {'method': OptimizerMethod.CMA_ES}

    MPPI = {
        'method': OptimizerMethod.MPPI,
        'mppi_temperature': 1.0,
    }

    CEM = {
        'method': OptimizerMethod.CEM,
        'elite_fraction': 0.10,
    }

    # 报告行顺序
    ORDER = ('random', 'cma_es', 'mppi', 'cem')

    @classmethod
    def variants(cls, base: OptimizerConfig) -> Dict[str, OptimizerConfig]:
        """在 base 的预算上替换优化方法"""
        templates = {'random': cls.RANDOM, 'cma_es': cls.CMA_ES, 'mppi': cls.MPPI, 'cem': cls.CEM}
        return {name: base.model_copy(update=templates[name]) for name in cls.ORDER}
