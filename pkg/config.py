"""
应用配置管理
"""
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

# 加载环境变量
load_dotenv()


class Settings(BaseSettings):
    """应用配置类"""

    model_config = SettingsConfigDict(env_prefix="MORPHADAPT_", env_file=".env", extra="ignore")

    # 日志配置
    log_level: str = "INFO"
    log_file: Optional[str] = None

    # 输出目录（MORPHADAPT_OUT 覆盖 --out）
    out: Optional[str] = None

    # 并行配置
    workers: int = 1

    # 阶段执行记录
    ledger_name: str = "runs.db"


# 全局配置实例
settings = Settings()


def read_key_value_file(path: str) -> Dict[str, str]:
    """
    读取 key=value 配置文件

    Args:
        path: 配置文件路径

    Returns:
        扁平的键值字典（键保留点号命名空间）
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(file_path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"Config keys without value in {path}: {missing}")
    return dict(values)


def fold_dotted(flat: Dict[str, Any]) -> Dict[str, Any]:
    """把 'optimizer.method=cem' 形式的扁平键折叠为嵌套字典"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key '{key}' conflicts with scalar '{part}'")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Config key '{key}' conflicts with a namespace")
        node[parts[-1]] = value
    return nested


def merge_nested(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """递归合并嵌套字典，override 优先"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_nested(merged[key], value)
        else:
            merged[key] = value
    return merged
