"""
随机动作数据集
用学生形态在真实仿真器中执行随机拾取-放置回合
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from errors import DegenerateVariantError, SimulationDivergenceError
from progress_manager import progress_manager
from sim.engine import ParticleSimulator
from sim.scene import box_centroids, build_topology
from sim.settings import SimConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.metrics import normalized_performance
from tasks.spaces import TaskId, TaskSpace, get_task_space
from tasks.teacher import Trajectory
from tasks.variants import sample_variant
from utils.seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class RandomTransition:
    """d_i = (P_i, a_i, P'_i)"""

    positions: np.ndarray = field(repr=False)
    action: PickPlaceAction = field(repr=False)
    next_positions: np.ndarray = field(repr=False)
    episode: int = 0
    step: int = 0


@dataclass
class RandomDataset:
    """按回合组织的随机动作数据"""

    task_id: TaskId
    num_pickers: int
    seed: int
    episodes: List[Trajectory] = field(default_factory=list)

    def transitions(self) -> List[RandomTransition]:
        result = []
        for index, episode in enumerate(self.episodes):
            for t, action in enumerate(episode.actions):
                result.append(RandomTransition(
                    episode.states[t].particles, action, episode.states[t + 1].particles, index, t
                ))
        return result

    def arrays(self):
        """
        Returns:
            positions (E, T, N, 3)，actions (E, T, 6m)，displacements (E, T, N, 3)
        """
        positions = np.stack([[s.particles for s in e.states] for e in self.episodes])
        actions = np.stack([[a.to_vector() for a in e.actions] for e in self.episodes])
        return positions[:, :-1], actions, positions[:, 1:] - positions[:, :-1]

    def __len__(self) -> int:
        return sum(len(e.actions) for e in self.episodes)


class RandomActionPolicy:
    """随机动作策略：布料随机拾取一个粒子；箱子按顺序拾取"""

    def __init__(self, space: TaskSpace, config: SimConfig, num_pickers: int,
                 place_radius: Optional[float] = None):
        self.space = space
        self.config = config
        self.num_pickers = num_pickers
        self.place_radius = place_radius
        self.low = np.asarray(space.action_low, dtype=np.float64)
        self.high = np.asarray(space.action_high, dtype=np.float64)

    def _place_near(self, pick: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.place_radius is None:
            return rng.uniform(self.low, self.high)
        low = np.maximum(self.low, pick - self.place_radius)
        high = np.minimum(self.high, pick + self.place_radius)
        return rng.uniform(low, high)

    def _place_around_rack(self, pick: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        plank_x = 0.5 * (self.config.plank_min[0] + self.config.plank_max[0])
        top = self.config.plank_max[1]
        place = np.array([
            rng.uniform(plank_x - 0.15, plank_x + 0.15),
            rng.uniform(0.5 * top, top + 0.15),
            pick[2] + rng.uniform(-0.1, 0.1),
        ])
        return np.clip(place, self.low, self.high)

    def __call__(self, state: ParticleState, t: int, rng: np.random.Generator) -> PickPlaceAction:
        picks, places = [], []
        if self.space.task_id == TaskId.THREE_BOXES:
            groups = build_topology(self.space.task_id, self.config).box_groups
            centroids = box_centroids(state.particles, groups)
            for k in range(self.num_pickers):
                box = (t * self.num_pickers + k) % self.space.num_boxes
                picks.append(centroids[box])
                places.append(np.array([
                    rng.uniform(self.space.line_range[0] + self.space.box_half_size,
                                self.space.line_range[1] - self.space.box_half_size),
                    self.space.box_half_size,
                    0.0,
                ]))
        else:
            chosen = rng.choice(state.num_particles, size=self.num_pickers, replace=False)
            for index in chosen:
                pick = state.particles[index]
                picks.append(pick)
                if self.space.task_id == TaskId.DRY_CLOTH:
                    places.append(self._place_around_rack(pick, rng))
                else:
                    places.append(self._place_near(pick, rng))
        picks = np.clip(np.stack(picks), self.low, self.high)
        places = np.clip(np.stack(places), self.low, self.high)
        return PickPlaceAction(picks=picks, places=places)


def generate_random_dataset(task_id, k_r: int = 2000, seed: int = 0, sim_config: Optional[SimConfig] = None,
                            num_pickers: Optional[int] = None, place_radius: Optional[float] = 0.3) -> RandomDataset:
    """
    生成随机动作数据集

    Args:
        task_id: 任务ID
        k_r: 转移数量下限，按回合（长度 3）向上取整
        seed: 随机种子
        sim_config: 仿真配置
        num_pickers: 执行器数量，默认学生形态
        place_radius: ClothFold 随机放置点相对拾取点的范围

    Returns:
        RandomDataset
    """
    if k_r < 1:
        raise ValueError(f"k_r must be at least 1, got {k_r}")
    space = get_task_space(task_id)
    config = sim_config or SimConfig()
    pickers = num_pickers or space.student_morphology
    simulator = ParticleSimulator(space.task_id, config)
    policy = RandomActionPolicy(space, config, pickers, place_radius)
    count = math.ceil(k_r / space.horizon)

    dataset = RandomDataset(space.task_id, pickers, seed)
    attempt = 0
    while len(dataset.episodes) < count:
        rng = derive_rng(seed, attempt)
        attempt += 1
        variant = sample_variant(space.task_id, rng)
        states = [simulator.reset(variant, seed=seed, num_pickers=pickers)]
        actions = []
        try:
            for t in range(space.horizon):
                action = policy(states[-1], t, rng)
                actions.append(action)
                states.append(simulator.step_pick_place(states[-1], action))
        except SimulationDivergenceError as e:
            logger.warning(f"Random episode {attempt - 1} dropped: {e}")
            continue
        try:
            score = normalized_performance(space.task_id, states[-1], states[0], variant, config)
        except DegenerateVariantError:
            score = 0.0
        dataset.episodes.append(Trajectory(variant, states, actions, pickers, seed, score))
        progress_manager.update_progress("gen-random", len(dataset.episodes), count)

    logger.info(f"Generated {len(dataset)} random {space.task_id.value} transitions over {count} episodes")
    return dataset
