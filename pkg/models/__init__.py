# Models package

from .stage_runs import StageRun, StageStatus

# 导出所有模型
__all__ = [
    'StageRun',
    'StageStatus',
]
