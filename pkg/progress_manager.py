"""进度管理器"""
import logging
import threading
from typing import Any, Callable, Dict, List

logger = logging.getLogger(__name__)

ProgressListener = Callable[[Dict[str, Any]], None]


class ProgressManager:
    """管理进度监听器"""

    def __init__(self):
        self.listeners: Dict[str, List[ProgressListener]] = {}  # stage -> listeners，"*" 监听全部
        self._lock = threading.Lock()

    def add_listener(self, listener: ProgressListener, stage: str = "*"):
        """添加进度监听器"""
        with self._lock:
            self.listeners.setdefault(stage, []).append(listener)
        logger.debug(f"Added progress listener for stage {stage}")

    def remove_listener(self, listener: ProgressListener, stage: str = "*"):
        """移除进度监听器"""
        with self._lock:
            if stage in self.listeners and listener in self.listeners[stage]:
                self.listeners[stage].remove(listener)
                if not self.listeners[stage]:
                    del self.listeners[stage]

    def update_progress(self, stage: str, completed: int, total: int, **metrics: Any):
        """更新进度并同步通知所有监听器"""
        progress = {
            "stage": stage,
            "completed": completed,
            "total": total,
            "percentage": round(100.0 * completed / total, 2) if total else 100.0,
            **metrics,
        }
        with self._lock:
            targets = list(self.listeners.get(stage, [])) + list(self.listeners.get("*", []))

        for listener in targets:
            try:
                listener(progress)
            except Exception as e:
                logger.error(f"Failed to deliver progress for stage {stage}: {e}")



# 全局进度管理器实例
progress_manager = ProgressManager()
