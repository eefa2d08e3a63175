"""
示教学习训练
缓冲区预先放入学生数据集，与真实仿真器交互的回合和梯度更新交替进行
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from autodiff.optim import Adam
from errors import EmptyDatasetError, ShapeMismatchError, SimulationDivergenceError
from lfd.buffer import ReplayBuffer
from lfd.evaluate import evaluate_policy
from lfd.losses import actor_update, critic_update
from lfd.networks import Policy, PolicyParams, random_crop
from lfd.settings import LfdConfig
from progress_manager import progress_manager
from sim.engine import ParticleSimulator
from sim.settings import SimConfig
from sim.state import IMAGE_SIZE, ParticleState, PickPlaceAction
from tasks.observations import RewardFunction, image_observation, observation_dim, state_observation
from tasks.spaces import get_task_space
from tasks.teacher import Trajectory
from tasks.variants import TaskVariant, sample_variant
from trajopt.transfer import StudentDataset
from utils.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

# 默认评估种子数
EVAL_SEED_COUNT = 5


@dataclass
class CurvePoint:
    step: int
    episodes: int
    q25: float
    mean: float
    std: float
    median: float
    q75: float
    n: int
    critic_loss: float = float("nan")
    policy_loss: float = float("nan")


@dataclass
class LfdResult:
    params: PolicyParams
    curve: List[CurvePoint] = field(default_factory=list)
    final_stats: Dict[str, float] = field(default_factory=dict)
    episodes: int = 0
    dropped_episodes: int = 0
    buffer_size: int = 0
    duration_seconds: float = 0.0

    def curve_rows(self) -> List[dict]:
        return [asdict(point) for point in self.curve]


def default_eval_seeds(seed: int, count: int = EVAL_SEED_COUNT) -> List[int]:
    """由训练种子派生的评估种子"""
    return [derive_seed(seed, 0xEA, index) for index in range(count)]


def imitation_reward(next_state: ParticleState, demo_state: ParticleState, weight: float, sigma: float) -> float:
    """w_IR · exp(−d² / σ²)，d² 为逐粒子平方距离的均值"""
    squared = float(np.mean(np.sum((next_state.particles - demo_state.particles) ** 2, axis=1)))
    return weight * float(np.exp(-squared / sigma ** 2))


def fill_buffer(buffer: ReplayBuffer, dataset: StudentDataset) -> None:
    """把学生数据集作为演示元组写入缓冲区"""
    batch = dataset.transitions
    buffer.add_batch(
        batch.observations, batch.actions, batch.rewards, batch.next_observations, batch.dones, demo=True,
        images=batch.images if buffer.image_shape else None,
        next_images=batch.next_images if buffer.image_shape else None,
    )


class EnvironmentRunner:
    """在真实仿真器中执行策略回合并写入缓冲区；支持从演示状态重置（RSI）"""

    def __init__(self, policy: Policy, dataset: StudentDataset, config: LfdConfig, sim_config: SimConfig):
        self.policy = policy
        self.task_id = dataset.task_id
        self.space = get_task_space(self.task_id)
        self.demos: List[Trajectory] = dataset.trajectories
        self.config = config
        self.sim_config = sim_config
        self.simulator = ParticleSimulator(self.task_id, sim_config)
        self.num_pickers = dataset.num_pickers

    def _observe(self, state: ParticleState, variant: TaskVariant):
        obs = state_observation(self.task_id, state, variant, self.sim_config)
        image = image_observation(self.task_id, state, variant, self.sim_config) if self.config.uses_images else None
        return obs, image

    def _start(self, episode: int, rng: np.random.Generator):
        """返回 (variant, s0, 起始状态, 起始步, 演示状态序列或 None)"""
        if self.demos and rng.random() < self.config.rsi_ir_probability:
            demo = self.demos[int(rng.integers(len(self.demos)))]
            start = int(rng.integers(len(demo.actions)))
            return demo.variant, demo.states[0], demo.states[start].copy(), start, demo.states
        variant = sample_variant(self.task_id, derive_rng(self.config.seed, 0xE5, episode))
        s0 = self.simulator.reset(variant, seed=self.config.seed, num_pickers=self.num_pickers)
        return variant, s0, s0, 0, None

    def run(self, episode: int, buffer: ReplayBuffer, rng: np.random.Generator) -> bool:
        """执行一个回合；发散时丢弃整条回合并返回 False"""
        variant, s0, state, start, demo_states = self._start(episode, rng)
        reward_fn = RewardFunction(self.task_id, variant, s0, self.sim_config, self.config.reward_mode)
        obs, image = self._observe(state, variant)
        pending = []
        try:
            for t in range(start, self.space.horizon):
                actor_input = image if self.config.uses_images else obs
                action = self.policy.act(actor_input, deterministic=False, rng=rng)
                next_state = self.simulator.step_pick_place(state, PickPlaceAction.from_vector(action))
                reward = reward_fn(state, next_state)
                if demo_states is not None and t + 1 < len(demo_states):
                    reward += imitation_reward(next_state, demo_states[t + 1], self.config.imitation_weight,
                                               self.config.imitation_sigma)
                next_obs, next_image = self._observe(next_state, variant)
                pending.append((obs, action, reward, next_obs, t == self.space.horizon - 1, image, next_image))
                state, obs, image = next_state, next_obs, next_image
        except SimulationDivergenceError as e:
            logger.warning(f"LfD episode {episode} dropped: {e}")
            return False
        for obs, action, reward, next_obs, done, image, next_image in pending:
            buffer.add(obs, action, reward, next_obs, done, demo=False, image=image, next_image=next_image)
        return True


def train_lfd(student_dataset: StudentDataset, cfg: Optional[LfdConfig] = None,
              sim_config: Optional[SimConfig] = None, eval_seeds: Optional[Sequence[int]] = None) -> LfdResult:
    """
    训练策略

    Args:
        student_dataset: 学生数据集（非空）
        cfg: 示教学习配置
        sim_config: 仿真配置
        eval_seeds: 评估种子，默认由训练种子派生

    Returns:
        LfdResult（策略参数、学习曲线、最终评估统计）
    """
    cfg = cfg or LfdConfig()
    config = sim_config or SimConfig()
    if len(student_dataset) == 0 or student_dataset.transitions is None:
        raise EmptyDatasetError("Student dataset is empty")
    if cfg.uses_images and student_dataset.transitions.images is None:
        raise ShapeMismatchError("Image observation mode needs a student dataset rendered with images")
    task_id = student_dataset.task_id
    pickers = student_dataset.num_pickers
    obs_dim = observation_dim(task_id, pickers)
    eval_seeds = list(eval_seeds) if eval_seeds is not None else default_eval_seeds(cfg.seed)

    policy = Policy(task_id, pickers, obs_dim, cfg, seed=cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim, 6 * pickers,
                          (IMAGE_SIZE, IMAGE_SIZE, 3) if cfg.uses_images else None)
    fill_buffer(buffer, student_dataset)
    runner = EnvironmentRunner(policy, student_dataset, cfg, config)
    critic_optimizer = Adam(policy.critic.parameters(), cfg.critic_lr)
    actor_optimizer = Adam(policy.actor.parameters(), cfg.actor_lr)
    rng = derive_rng(cfg.seed, 0x1F)

    result = LfdResult(params=policy.to_params())
    logger.info(
        f"Training LfD on {task_id.value}: {len(buffer)} demo tuples, {cfg.training_steps} steps, "
        f"{cfg.observation_mode.value} observations, RSI-IR {cfg.rsi_ir_probability}"
    )
    started = time.perf_counter()

    def evaluate(step: int, critic_loss: float, policy_loss: float) -> None:
        if cfg.eval_rollouts < 1:
            return
        stats = evaluate_policy(policy, task_id, cfg.eval_rollouts, eval_seeds, config, workers=cfg.workers)
        result.curve.append(CurvePoint(step, result.episodes, critic_loss=critic_loss,
                                       policy_loss=policy_loss, **stats))
        result.final_stats = stats

    critic_value = policy_value = float("nan")
    evaluate(0, critic_value, policy_value)
    for step in range(1, cfg.training_steps + 1):
        if step % cfg.rollout_interval == 0:
            if runner.run(result.episodes + result.dropped_episodes, buffer, rng):
                result.episodes += 1
            else:
                result.dropped_episodes += 1

        _, batch = buffer.sample(cfg.batch_size, rng)
        if cfg.uses_images:
            batch.actor_inputs = random_crop(batch.actor_inputs, cfg.crop_padding, rng)
            batch.next_actor_inputs = random_crop(batch.next_actor_inputs, cfg.crop_padding, rng)
        critic_value = critic_update(policy, batch, cfg, critic_optimizer, rng)
        policy_value = actor_update(policy, batch, cfg, actor_optimizer, rng)["loss"]

        if step % cfg.eval_interval == 0:
            evaluate(step, critic_value, policy_value)
        progress_manager.update_progress(
            "train-lfd", step, cfg.training_steps, critic_loss=critic_value, policy_loss=policy_value
        )

    if cfg.training_steps and cfg.training_steps % cfg.eval_interval != 0:
        evaluate(cfg.training_steps, critic_value, policy_value)

    result.duration_seconds = time.perf_counter() - started
    result.buffer_size = len(buffer)
    policy.metadata = {
        "training_steps": cfg.training_steps,
        "episodes": result.episodes,
        "seed": cfg.seed,
        "final_mean": result.final_stats.get("mean", float("nan")),
    }
    result.params = policy.to_params()
    logger.info(
        f"LfD finished after {cfg.training_steps} steps and {result.episodes} episodes "
        f"({result.dropped_episodes} dropped), final mean {result.final_stats.get('mean', float('nan')):.3f}"
    )
    return result
