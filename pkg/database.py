"""
阶段执行记录的数据库连接和会话管理
每个输出目录一个 sqlite 文件
"""
import logging
from pathlib import Path
from typing import Dict

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

from config import settings

logger = logging.getLogger(__name__)

# 创建基础模型类
Base = declarative_base()

# 输出目录 -> 会话工厂
_session_factories: Dict[str, sessionmaker] = {}


def ledger_url(out_dir: str) -> str:
    return f"sqlite:///{Path(out_dir).resolve() / settings.ledger_name}"


def get_engine(out_dir: str) -> Engine:
    return get_session_factory(out_dir).kw["bind"]


def get_session_factory(out_dir: str) -> sessionmaker:
    """获取（必要时创建）输出目录对应的会话工厂"""
    key = str(Path(out_dir).resolve())
    if key not in _session_factories:
        Path(key).mkdir(parents=True, exist_ok=True)
        engine = create_engine(ledger_url(key), connect_args={"check_same_thread": False})
        _session_factories[key] = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    return _session_factories[key]


def init_db(out_dir: str) -> None:
    """初始化数据库表"""
    try:
        # 导入所有模型以确保它们被注册
        from models import stage_runs  # noqa: F401

        Base.metadata.create_all(bind=get_engine(out_dir))
        logger.debug(f"Stage ledger ready at {ledger_url(out_dir)}")
    except Exception as e:
        logger.error(f"Failed to initialize stage ledger: {e}")
        raise
