"""
点集几何
"""
import numpy as np
from scipy.spatial import cKDTree

from errors import ShapeMismatchError


def chamfer_distance(p: np.ndarray, q: np.ndarray) -> float:
    """
    对称 chamfer 距离：两个方向最近邻平均距离之和的一半

    Args:
        p: (N, 3) 点集
        q: (M, 3) 点集

    Returns:
        距离（米）
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ShapeMismatchError("chamfer_distance requires two non-empty point sets")
    p_to_q, _ = cKDTree(q).query(p)
    q_to_p, _ = cKDTree(p).query(q)
    return 0.5 * (float(np.mean(p_to_q)) + float(np.mean(q_to_p)))
