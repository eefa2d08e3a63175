"""
无梯度序列优化器
CEM、CMA-ES、MPPI 与随机搜索，共用 ask/tell 接口；候选代价可在线程池中分块并行计算
"""
import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import cma
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import OptimizerError
from tasks.spaces import EPISODE_HORIZON
from utils.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

# 候选代价函数：(P, D) -> (P,)
CostFunction = Callable[[np.ndarray], np.ndarray]


class OptimizerMethod(enum.Enum):
    """优化方法"""
    CEM = "cem"
    CMA_ES = "cma_es"
    MPPI = "mppi"
    RANDOM = "random"


class OptimizerConfig(BaseModel):
    """轨迹优化配置"""

    model_config = ConfigDict(extra="forbid")

    method: OptimizerMethod = OptimizerMethod.CEM
    planning_horizon: int = 2
    iterations: int = 2
    # 学习模型推演步数预算 = population × horizon × iterations
    env_interactions: int = 21000
    elite_fraction: float = 0.10
    mppi_temperature: float = 1.0
    # CEM 标准差下限（绝对值，单位：米）
    std_floor: float = 1e-3
    # CMA-ES 初始步长（归一化动作坐标）
    cma_sigma0: float = 0.5
    seed: int = 0
    # 滚动时域：每轮提交最优序列的第一个动作后重新优化剩余部分
    receding: bool = True
    match_intermediate: bool = False
    intermediate_weight: float = 1.0
    workers: int = 1

    @field_validator("method", mode="before")
    @classmethod
    def _parse_method(cls, value):
        return OptimizerMethod(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check(self):
        if not 1 <= self.planning_horizon <= EPISODE_HORIZON:
            raise ValueError(f"optimizer.planning_horizon must lie in [1, {EPISODE_HORIZON}]")
        if self.iterations < 1:
            raise ValueError("optimizer.iterations must be at least 1")
        if self.env_interactions < self.planning_horizon * self.iterations:
            raise ValueError("optimizer.env_interactions must cover at least one candidate per iteration")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("optimizer.elite_fraction must lie in (0, 1]")
        if self.mppi_temperature <= 0:
            raise ValueError("optimizer.mppi_temperature must be positive")
        if self.std_floor <= 0 or self.cma_sigma0 <= 0:
            raise ValueError("optimizer.std_floor and optimizer.cma_sigma0 must be positive")
        if self.intermediate_weight < 0:
            raise ValueError("optimizer.intermediate_weight must be non-negative")
        if self.workers < 1:
            raise ValueError("optimizer.workers must be at least 1")
        return self

    @property
    def commits(self) -> int:
        """优化轮数：滚动时域为 horizon 轮，否则 1 轮"""
        return self.planning_horizon if self.receding else 1

    @property
    def population(self) -> int:
        """每轮每次迭代的候选数量，预算在各轮之间平均分配"""
        per_round = self.env_interactions // self.commits
        return max(1, per_round // (self.planning_horizon * self.iterations))

    @property
    def elite_count(self) -> int:
        return elite_count(self.population, self.elite_fraction)


def elite_count(population: int, elite_fraction: float) -> int:
    return max(1, int(math.floor(elite_fraction * population)))


@dataclass
class GaussianDistribution:
    """动作序列上的对角高斯分布（展平为 D 维）"""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_bounds(cls, low: np.ndarray, high: np.ndarray) -> "GaussianDistribution":
        """均值取动作盒中心，标准差取半边长"""
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        return cls(mean=(low + high) / 2.0, std=(high - low) / 2.0)

    def copy(self) -> "GaussianDistribution":
        return GaussianDistribution(self.mean.copy(), self.std.copy())


def sample_candidates(distribution: GaussianDistribution, population: int, low: np.ndarray, high: np.ndarray,
                      seed: int, *keys: int) -> np.ndarray:
    """
    按 (seed, keys..., 候选序号) 派生的独立随机流采样并裁剪到边界

    Returns:
        (population, D)
    """
    dim = distribution.mean.shape[0]
    noise = np.stack([derive_rng(seed, *keys, index).standard_normal(dim) for index in range(population)])
    return np.clip(distribution.mean + distribution.std * noise, low, high)


def _finite_costs(costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0 or np.all(np.isnan(costs)):
        raise OptimizerError("All candidate costs are NaN")
    return np.where(np.isnan(costs), np.inf, costs)


def cem_iterate(distribution: GaussianDistribution, candidates: np.ndarray, costs: np.ndarray,
                elite_fraction: float = 0.10, std_floor: float = 1e-3) -> GaussianDistribution:
    """
    交叉熵更新：用精英集重新拟合均值与标准差

    Args:
        distribution: 当前分布
        candidates: (P, D) 已裁剪的候选
        costs: (P,) 代价，NaN 视为无穷大
        elite_fraction: 精英比例
        std_floor: 标准差下限

    Returns:
        更新后的分布
    """
    costs = _finite_costs(costs)
    count = elite_count(len(candidates), elite_fraction)
    if not 1 <= count <= len(candidates):
        raise OptimizerError(f"Elite count {count} incompatible with population {len(candidates)}")
    elites = candidates[np.argsort(costs, kind="stable")[:count]]
    return GaussianDistribution(
        mean=elites.mean(axis=0),
        std=np.maximum(elites.std(axis=0), std_floor),
    )


def mppi_update(distribution: GaussianDistribution, candidates: np.ndarray, costs: np.ndarray,
                temperature: float) -> GaussianDistribution:
    """路径积分更新：按 exp(-(c - c_min) / temperature) 加权平均全部候选，标准差不变"""
    costs = _finite_costs(costs)
    best = costs.min()
    with np.errstate(invalid="ignore"):
        weights = np.where(np.isfinite(costs), np.exp(-(costs - best) / temperature), 0.0)
    weights = weights / weights.sum()
    return GaussianDistribution(mean=weights @ candidates, std=distribution.std.copy())


def cma_es_step(strategy: cma.CMAEvolutionStrategy, solutions: Sequence[np.ndarray],
                costs: np.ndarray) -> cma.CMAEvolutionStrategy:
    """CMA-ES 更新：均值、协方差与步长自适应由 pycma 完成；NaN 代价替换为当前最差值"""
    costs = _finite_costs(costs)
    finite = costs[np.isfinite(costs)]
    worst = finite.max() + 1.0 if finite.size else 1.0
    strategy.tell(list(solutions), np.where(np.isfinite(costs), costs, worst).tolist())
    return strategy


# ------------------------------------------------------------------
# ask/tell 采样器
# ------------------------------------------------------------------
class CandidateSampler:
    """采样器基类"""

    def __init__(self, config: OptimizerConfig, low: np.ndarray, high: np.ndarray, population: int,
                 seed_keys: Tuple[int, ...] = ()):
        self.config = config
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.population = population
        self.seed_keys = tuple(seed_keys)

    def ask(self, iteration: int) -> np.ndarray:
        raise NotImplementedError

    def tell(self, candidates: np.ndarray, costs: np.ndarray) -> None:
        raise NotImplementedError


class CemSampler(CandidateSampler):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.distribution = GaussianDistribution.from_bounds(self.low, self.high)

    def ask(self, iteration: int) -> np.ndarray:
        return sample_candidates(self.distribution, self.population, self.low, self.high,
                                 self.config.seed, *self.seed_keys, iteration)

    def tell(self, candidates, costs) -> None:
        self.distribution = cem_iterate(
            self.distribution, candidates, costs, self.config.elite_fraction, self.config.std_floor
        )


class MppiSampler(CemSampler):
    def tell(self, candidates, costs) -> None:
        self.distribution = mppi_update(self.distribution, candidates, costs, self.config.mppi_temperature)


class RandomSampler(CandidateSampler):
    """在动作盒内均匀采样，不更新分布"""

    def ask(self, iteration: int) -> np.ndarray:
        return np.stack([
            derive_rng(self.config.seed, *self.seed_keys, iteration, index).uniform(self.low, self.high)
            for index in range(self.population)
        ])

    def tell(self, candidates, costs) -> None:
        _finite_costs(costs)


class CmaEsSampler(CandidateSampler):
    """在 [-1, 1] 归一化坐标中运行 pycma"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        if self.population < 2:
            raise OptimizerError(f"CMA-ES needs a population of at least 2, got {self.population}")
        self.center = (self.low + self.high) / 2.0
        self.half = np.maximum((self.high - self.low) / 2.0, 1e-12)
        # pycma 把 seed=0 解释为按时间取种子
        seed = derive_seed(self.config.seed, *self.seed_keys) % (2**31 - 2) + 1
        self.strategy = cma.CMAEvolutionStrategy(
            np.zeros_like(self.center),
            self.config.cma_sigma0,
            {"seed": seed, "bounds": [-1.0, 1.0], "popsize": self.population, "verbose": -9},
        )
        self._solutions: List[np.ndarray] = []

    def ask(self, iteration: int) -> np.ndarray:
        self._solutions = self.strategy.ask()
        return np.clip(self.center + self.half * np.asarray(self._solutions), self.low, self.high)

    def tell(self, candidates, costs) -> None:
        cma_es_step(self.strategy, self._solutions, costs)


SAMPLERS = {
    OptimizerMethod.CEM: CemSampler,
    OptimizerMethod.MPPI: MppiSampler,
    OptimizerMethod.CMA_ES: CmaEsSampler,
    OptimizerMethod.RANDOM: RandomSampler,
}


def build_sampler(config: OptimizerConfig, low, high, population: int,
                  seed_keys: Tuple[int, ...] = ()) -> CandidateSampler:
    return SAMPLERS[config.method](config, low, high, population, seed_keys)


# ------------------------------------------------------------------
# 通用优化循环
# ------------------------------------------------------------------
@dataclass
class SearchResult:
    best: np.ndarray
    best_cost: float
    # 每次迭代后的历史最优代价（单调不增）
    history: List[float] = field(default_factory=list)
    evaluations: int = 0


def evaluate_costs(cost_fn: CostFunction, candidates: np.ndarray, workers: int = 1,
                   executor: Optional[ThreadPoolExecutor] = None) -> np.ndarray:
    """分块计算候选代价；分块方式不影响结果"""
    if workers <= 1 or len(candidates) < 2:
        return np.asarray(cost_fn(candidates), dtype=np.float64)
    chunks = np.array_split(candidates, min(workers, len(candidates)))
    if executor is None:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(cost_fn, chunks))
    else:
        parts = list(executor.map(cost_fn, chunks))
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def optimize_sequence(cost_fn: CostFunction, low: np.ndarray, high: np.ndarray, config: OptimizerConfig,
                      population: Optional[int] = None, seed_keys: Tuple[int, ...] = (),
                      executor: Optional[ThreadPoolExecutor] = None) -> SearchResult:
    """
    在动作盒内最小化 cost_fn

    Args:
        cost_fn: (P, D) -> (P,)
        low, high: (D,) 边界
        config: 优化配置
        population: 候选数量，默认 config.population
        seed_keys: 派生随机流的附加键
        executor: 可复用的线程池

    Returns:
        SearchResult
    """
    population = population or config.population
    sampler = build_sampler(config, low, high, population, seed_keys)
    best, best_cost = None, math.inf
    history: List[float] = []
    evaluations = 0
    for iteration in range(config.iterations):
        candidates = sampler.ask(iteration)
        costs = evaluate_costs(cost_fn, candidates, config.workers, executor)
        evaluations += len(candidates)
        ranked = np.where(np.isnan(costs), np.inf, costs)
        index = int(np.argmin(ranked))
        if best is None or ranked[index] < best_cost:
            best, best_cost = candidates[index].copy(), float(ranked[index])
        sampler.tell(candidates, costs)
        history.append(best_cost)
        logger.debug(f"{config.method.value} iteration {iteration}: best {best_cost:.6g}")
    return SearchResult(best=best, best_cost=best_cost, history=history, evaluations=evaluations)
