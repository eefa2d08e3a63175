"""
统计汇总
所有报告共用的四分位格式：25th、mean±std、median、75th
"""
from typing import Dict, Sequence

import numpy as np

from errors import EmptyStatsError

STAT_KEYS = ("q25", "mean", "std", "median", "q75", "n")


def summary_stats(values: Sequence[float], allow_empty: bool = False) -> Dict[str, float]:
    """
    计算四分位统计

    Args:
        values: 标量序列
        allow_empty: 为空时返回 NaN 统计而不是报错

    Returns:
        {q25, mean, std, median, q75, n}
    """
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        if not allow_empty:
            raise EmptyStatsError("Cannot summarize an empty set of scores")
        nan = float("nan")
        return {"q25": nan, "mean": nan, "std": nan, "median": nan, "q75": nan, "n": 0}
    q25, median, q75 = np.percentile(values, [25.0, 50.0, 75.0])
    return {
        "q25": float(q25),
        "mean": float(values.mean()),
        "std": float(values.std()),
        "median": float(median),
        "q75": float(q75),
        "n": int(values.size),
    }
