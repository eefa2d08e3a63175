"""
随机数流
所有随机性都来自显式传入的种子，由 (seed, key...) 派生独立的流
"""
from typing import List

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """由 (seed, keys...) 派生独立的随机数流；并行和串行执行得到相同结果"""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def derive_seed(seed: int, *keys: int) -> int:
    """派生一个 63 位整数种子"""
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))


def split_seeds(seed: int, count: int) -> List[int]:
    rng = derive_rng(seed)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=count)]
