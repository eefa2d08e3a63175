"""
策略评估
确定性（均值动作）回合，报告末状态归一化性能的四分位统计
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Union

from errors import DegenerateVariantError, EmptyStatsError, SimulationDivergenceError
from lfd.networks import Policy, PolicyParams
from sim.engine import ParticleSimulator
from sim.settings import SimConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.metrics import normalized_performance
from tasks.spaces import get_task_space
from tasks.variants import TaskVariant, sample_variant
from utils.seeding import derive_rng
from utils.stats import summary_stats

logger = logging.getLogger(__name__)

Controller = Callable[[ParticleState, int, TaskVariant], PickPlaceAction]

# 评估变体随机流的键，与训练流分开
_EVAL_KEY = 0xEA


def _controller(policy: Union[Policy, PolicyParams, Controller], sim_config: SimConfig) -> Controller:
    if isinstance(policy, PolicyParams):
        policy = Policy.from_params(policy)
    if isinstance(policy, Policy):
        return policy.controller(sim_config, deterministic=True)
    return policy


def _num_pickers(policy, default: int) -> int:
    if isinstance(policy, (Policy, PolicyParams)):
        return policy.num_pickers
    return default


def rollout_score(task_id, controller: Controller, variant: TaskVariant, num_pickers: int,
                  sim_config: SimConfig, seed: int = 0) -> float:
    """执行一个回合，返回末状态归一化性能；仿真发散记为 0"""
    space = get_task_space(task_id)
    simulator = ParticleSimulator(space.task_id, sim_config)
    state = s0 = simulator.reset(variant, seed=seed, num_pickers=num_pickers)
    try:
        for t in range(space.horizon):
            state = simulator.step_pick_place(state, controller(state, t, variant))
    except SimulationDivergenceError as e:
        logger.warning(f"Evaluation rollout diverged, scored as 0: {e}")
        return 0.0
    return normalized_performance(space.task_id, state, s0, variant, sim_config)


def policy_scores(policy: Union[Policy, PolicyParams, Controller], task_id, n_rollouts: int,
                  seeds: Sequence[int], sim_config: Optional[SimConfig] = None,
                  num_pickers: Optional[int] = None, workers: int = 1) -> List[float]:
    """逐回合的末状态归一化性能（跳过退化变体）"""
    if n_rollouts < 1 or not seeds:
        raise EmptyStatsError("Policy evaluation needs at least one rollout and one seed")
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    controller = _controller(policy, config)
    pickers = _num_pickers(policy, num_pickers or space.student_morphology)

    def run(index: int) -> Optional[float]:
        seed = int(seeds[index % len(seeds)])
        variant = sample_variant(space.task_id, derive_rng(seed, _EVAL_KEY, index // len(seeds)))
        try:
            return rollout_score(space.task_id, controller, variant, pickers, config, seed)
        except DegenerateVariantError as e:
            logger.warning(f"Evaluation rollout {index} skipped: {e}")
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results: List[Optional[float]] = list(pool.map(run, range(n_rollouts)))
    else:
        results = [run(index) for index in range(n_rollouts)]
    return [r for r in results if r is not None]


def evaluate_policy(policy: Union[Policy, PolicyParams, Controller], task_id, n_rollouts: int,
                    seeds: Sequence[int], sim_config: Optional[SimConfig] = None,
                    num_pickers: Optional[int] = None, workers: int = 1) -> Dict[str, float]:
    """
    评估策略

    Args:
        policy: Policy、PolicyParams 或 (state, t, variant) -> action 控制器
        task_id: 任务ID
        n_rollouts: 回合数，按顺序轮流分配给各个种子
        seeds: 评估种子（应与训练种子不相交）
        sim_config: 仿真配置
        num_pickers: 控制器的执行器数量（Policy 自带）
        workers: 并行线程数

    Returns:
        {q25, mean, std, median, q75, n}
    """
    stats = summary_stats(policy_scores(policy, task_id, n_rollouts, seeds, sim_config, num_pickers, workers))
    space = get_task_space(task_id)
    logger.info(
        f"Evaluated {stats['n']} {space.task_id.value} rollouts: "
        f"mean {stats['mean']:.3f} ± {stats['std']:.3f}, median {stats['median']:.3f}"
    )
    return stats
