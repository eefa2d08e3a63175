"""
流水线阶段执行记录模型
"""
import enum

from sqlalchemy import Column, DateTime, Enum, Float, Integer, String, Text
from sqlalchemy.sql import func

from database import Base


class StageStatus(enum.Enum):
    """执行状态枚举"""
    RUNNING = "running"    # 运行中
    SUCCESS = "success"    # 成功
    FAILED = "failed"      # 失败
    SKIPPED = "skipped"    # 已有产物，跳过


class StageRun(Base):
    """阶段执行记录"""

    __tablename__ = "stage_runs"

    id = Column(Integer, primary_key=True, index=True)
    stage = Column(String(64), nullable=False, index=True, comment="阶段名")
    status = Column(Enum(StageStatus), nullable=False, comment="执行状态")

    # 运行参数
    config_hash = Column(String(64), comment="实验配置哈希")
    seed = Column(Integer, comment="全局种子")

    # 时间
    start_time = Column(DateTime(timezone=True), server_default=func.now(), comment="开始时间")
    end_time = Column(DateTime(timezone=True), comment="结束时间")
    duration_seconds = Column(Float, comment="执行时长（秒）")

    # 产物与日志
    artifact_path = Column(Text, comment="产物路径")
    details = Column(Text, comment="详细信息（JSON）")
    error_message = Column(Text, comment="错误信息")
    error_traceback = Column(Text, comment="错误堆栈")

    def __repr__(self):
        return f"<StageRun(id={self.id}, stage='{self.stage}', status='{self.status.value}')>"
