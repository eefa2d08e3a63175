"""
粒子仿真引擎
基于位置的动力学（PBD）：布料弹簧约束迭代投影、地面/晾衣杆碰撞、刚体箱子平移
"""
import logging
from typing import Optional, Tuple

import numpy as np

from errors import (
    ActionBoundsError,
    MorphologyMismatchError,
    SimulationDivergenceError,
    TaskStateMismatchError,
)
from sim.scene import (
    SceneTopology,
    box_layout,
    build_topology,
    cloth_layout,
    picker_park_position,
)
from sim.settings import SimConfig
from sim.state import ParticleState, PickPlaceAction
from tasks.spaces import TaskId, TaskSpace, get_task_space, parse_task_id
from tasks.variants import TaskVariant, validate_variant

logger = logging.getLogger(__name__)

# 动作边界检查的数值容差
_BOUNDS_EPS = 1e-9
# 布料初始离地高度
_DROP_HEIGHT = 0.01


class ParticleSimulator:
    """
    单任务仿真器
    实例不可被并发修改；状态通过 ParticleState 值传递
    """

    def __init__(self, task_id: Optional[TaskId], config: Optional[SimConfig] = None):
        self.task_id = parse_task_id(task_id) if task_id is not None else None
        self.config = config or SimConfig()
        self.space: Optional[TaskSpace] = get_task_space(self.task_id) if self.task_id is not None else None

    def topology(self, num_particles: int) -> SceneTopology:
        topology = build_topology(self.task_id, self.config, num_particles if self.task_id is None else 0)
        if topology.num_particles != num_particles:
            raise TaskStateMismatchError(
                f"State has {num_particles} particles, {self.task_id.value if self.task_id else 'free'} "
                f"scene expects {topology.num_particles}"
            )
        return topology

    # ------------------------------------------------------------------
    # reset
    # ------------------------------------------------------------------

    def reset(self, variant: TaskVariant, seed: int = 0, num_pickers: Optional[int] = None) -> ParticleState:
        """
        构造变体对应的初始状态并静置

        Args:
            variant: 任务变体
            seed: 随机种子（引擎无随机成分，仅记录）
            num_pickers: 执行器数量，默认为教师形态

        Returns:
            ParticleState
        """
        space = validate_variant(variant)
        if self.task_id is None or space.task_id != self.task_id:
            raise TaskStateMismatchError(
                f"Variant for {space.task_id.value} passed to simulator for "
                f"{self.task_id.value if self.task_id else 'free particles'}"
            )
        pickers = num_pickers if num_pickers is not None else space.teacher_morphology
        park = picker_park_position(space)

        if space.has_cloth:
            translation = variant.cloth_translation or (0.0, 0.0)
            center = (space.cloth_center[0] + translation[0], space.cloth_center[1] + translation[1])
            particles = cloth_layout(self.config, center, variant.cloth_rotation or 0.0, self.config.ground_height + _DROP_HEIGHT)
        else:
            particles = box_layout(np.asarray(variant.box_starts), space.box_half_size)

        state = ParticleState(
            particles=particles,
            picker_positions=np.tile(park, (pickers, 1)),
            time_step=0,
            task_id=space.task_id,
        )
        state = self.settle(state)
        logger.debug(f"Reset {space.task_id.value} (seed={seed}) with {state.num_particles} particles")
        return state

    # ------------------------------------------------------------------
    # 宏动作
    # ------------------------------------------------------------------

    def check_action(self, state: ParticleState, action: PickPlaceAction) -> None:
        if action.num_pickers != state.num_pickers:
            raise MorphologyMismatchError(
                f"Action has {action.num_pickers} pickers, state has {state.num_pickers}"
            )
        if self.space is None:
            return
        low, high = self.space.action_bounds(action.num_pickers)
        vector = action.to_vector()
        if not np.all(np.isfinite(vector)):
            raise ActionBoundsError("Action contains non-finite coordinates")
        if np.any(vector < low - _BOUNDS_EPS) or np.any(vector > high + _BOUNDS_EPS):
            raise ActionBoundsError(f"Action outside {self.space.task_id.value} bounds: {vector.tolist()}")

    def step_pick_place(self, state: ParticleState, action: PickPlaceAction) -> ParticleState:
        """
        执行一次拾取-放置宏动作：抓取 -> 线性搬运 -> 释放 -> 静置

        Args:
            state: 当前状态
            action: 每个执行器的 (pick, place)

        Returns:
            新的平衡状态
        """
        _check_finite(state, "step_pick_place")
        self.check_action(state, action)
        topology = self.topology(state.num_particles)
        attached = self._grasp(state.particles, action.picks)

        # 无抓取：除 time_step 外状态不变
        if all(index is None for index in attached):
            result = state.copy()
            result.time_step = state.time_step + 1
            return result

        if topology.is_rigid:
            particles = self._transport_rigid(state.particles, topology, action, attached)
        else:
            particles = self._transport_cloth(state.particles, topology, action, attached)

        released = ParticleState(
            particles=particles,
            picker_positions=action.places.copy(),
            time_step=state.time_step + 1,
            task_id=state.task_id,
        )
        return self.settle(released)

    def _grasp(self, particles: np.ndarray, picks: np.ndarray) -> Tuple[Optional[int], ...]:
        """每个执行器抓取拾取点 pick_radius 范围内最近的粒子"""
        attached = []
        for pick in picks:
            distances = np.linalg.norm(particles - pick, axis=1)
            nearest = int(np.argmin(distances)) if len(distances) else -1
            if nearest >= 0 and distances[nearest] <= self.config.pick_radius:
                attached.append(nearest)
            else:
                attached.append(None)
        return tuple(attached)

    def _transport_rigid(self, particles, topology, action, attached) -> np.ndarray:
        """箱子随执行器整体平移；多个执行器抓同一箱子时取平均位移"""
        moved = particles.copy()
        owner = np.full(topology.num_particles, -1, dtype=np.int64)
        for box, group in enumerate(topology.box_groups):
            owner[group] = box
        steps = self.config.substeps_per_macro_action
        start = particles.copy()
        for step in range(1, steps + 1):
            fraction = step / steps
            offsets = {}
            for picker, index in enumerate(attached):
                if index is None:
                    continue
                delta = (action.places[picker] - action.picks[picker]) * fraction
                offsets.setdefault(int(owner[index]), []).append(delta)
            for box, deltas in offsets.items():
                group = topology.box_groups[box]
                moved[group] = start[group] + np.mean(deltas, axis=0)
        return moved

    def _transport_cloth(self, particles, topology, action, attached) -> np.ndarray:
        """被抓粒子沿直线逐子步移动，每个子步推进一次动力学"""
        x = particles.copy()
        v = np.zeros_like(x)
        grasp_offset = {
            picker: particles[index] - action.picks[picker]
            for picker, index in enumerate(attached)
            if index is not None
        }
        steps = self.config.substeps_per_macro_action
        monitor = _EnergyMonitor(self.config)
        for step in range(1, steps + 1):
            fraction = step / steps
            pins = {}
            for picker, offset in grasp_offset.items():
                picker_at = action.picks[picker] + (action.places[picker] - action.picks[picker]) * fraction
                pins[attached[picker]] = picker_at + offset
            x, v = self._substep(x, v, topology, pins)
            monitor.observe(v, f"transport step {step}")
        return x

    # ------------------------------------------------------------------
    # 静置
    # ------------------------------------------------------------------

    def settle(self, state: ParticleState, max_substeps: Optional[int] = None) -> ParticleState:
        """
        迭代动力学直到每子步最大位移小于容差或达到步数上限
        被执行器抓住的粒子保持固定

        Args:
            state: 状态
            max_substeps: 子步上限，默认 config.settle_steps

        Returns:
            静置后的状态
        """
        _check_finite(state, "settle")
        topology = self.topology(state.num_particles)
        limit = self.config.settle_steps if max_substeps is None else max_substeps
        pins = {index: state.particles[index].copy() for index in state.attached if index is not None}

        if topology.is_rigid:
            particles = self._settle_rigid(state.particles, topology, pins)
        else:
            particles = self._settle_particles(state.particles, topology, pins, limit)

        result = state.copy()
        result.particles = particles
        return result

    def _settle_rigid(self, particles, topology, pins) -> np.ndarray:
        """未被抓住的箱子整体落到地面"""
        settled = particles.copy()
        for group in topology.box_groups:
            if any(int(i) in pins for i in group):
                continue
            drop = settled[group, 1].min() - self.config.ground_height
            if drop != 0.0:
                settled[group, 1] -= drop
        return settled

    def _settle_particles(self, particles, topology, pins, limit) -> np.ndarray:
        x = particles.copy()
        v = np.zeros_like(x)
        monitor = _EnergyMonitor(self.config)
        for step in range(limit):
            previous = x
            x, v = self._substep(x, v, topology, pins)
            monitor.observe(v, f"settle step {step}")
            if np.max(np.abs(x - previous)) < self.config.settle_tolerance:
                logger.debug(f"Settled after {step + 1} substeps")
                break
        return self._limit_strain(x, topology, pins)

    # ------------------------------------------------------------------
    # PBD 子步
    # ------------------------------------------------------------------

    def _substep(self, x: np.ndarray, v: np.ndarray, topology: SceneTopology, pins: dict):
        cfg = self.config
        inv_mass = np.ones(len(x))
        pinned = np.fromiter(pins.keys(), dtype=np.int64, count=len(pins))
        inv_mass[pinned] = 0.0

        v = v.copy()
        v[:, 1] -= cfg.gravity * cfg.dt * inv_mass
        v *= 1.0 - cfg.damping
        p = x + v * cfg.dt
        if len(pinned):
            p[pinned] = np.stack([pins[i] for i in pinned])

        grounded = x[:, 1] <= cfg.ground_height + cfg.collision_margin
        on_plank = self._on_plank_top(x) if topology.has_plank else None

        for _ in range(cfg.solver_iterations):
            self._project_springs(p, topology, inv_mass, cfg.spring_stiffness)
            self._collide(p, x, grounded, on_plank, inv_mass)

        v = (p - x) / cfg.dt
        return p, v

    @staticmethod
    def _project_springs(p, topology, inv_mass, stiffness, target_scale: float = 1.0, stretch_only: bool = False):
        for color in topology.colors:
            i = topology.springs[color, 0]
            j = topology.springs[color, 1]
            delta = p[j] - p[i]
            length = np.linalg.norm(delta, axis=1)
            target = topology.rest_lengths[color] * target_scale
            error = length - target
            if stretch_only:
                error = np.maximum(error, 0.0)
            weight = inv_mass[i] + inv_mass[j]
            valid = (weight > 0) & (length > 1e-12)
            scale = np.zeros_like(length)
            scale[valid] = stiffness * error[valid] / (weight[valid] * length[valid])
            correction = delta * scale[:, None]
            p[i] += correction * inv_mass[i][:, None]
            p[j] -= correction * inv_mass[j][:, None]

    def _plank_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        margin = self.config.collision_margin
        return (
            np.asarray(self.config.plank_min) - margin,
            np.asarray(self.config.plank_max) + margin,
        )

    def _on_plank_top(self, x: np.ndarray) -> np.ndarray:
        low, high = self._plank_bounds()
        return (
            (x[:, 0] >= low[0]) & (x[:, 0] <= high[0])
            & (x[:, 2] >= low[2]) & (x[:, 2] <= high[2])
            & (np.abs(x[:, 1] - high[1]) <= self.config.collision_margin)
        )

    def _collide(self, p, x, grounded, on_plank, inv_mass) -> None:
        """地面与晾衣杆的单侧位置投影，接触粒子水平方向粘滞"""
        cfg = self.config
        free = inv_mass > 0
        stick = cfg.contact_stick

        below = p[:, 1] < cfg.ground_height
        p[below & free, 1] = cfg.ground_height
        touching = grounded & free & (p[:, 1] <= cfg.ground_height + cfg.collision_margin)
        if stick > 0 and np.any(touching):
            p[touching, 0] = x[touching, 0] + (1.0 - stick) * (p[touching, 0] - x[touching, 0])
            p[touching, 2] = x[touching, 2] + (1.0 - stick) * (p[touching, 2] - x[touching, 2])

        if on_plank is None:
            return
        low, high = self._plank_bounds()
        inside = free & np.all((p > low) & (p < high), axis=1)
        if np.any(inside):
            pts = p[inside]
            # 到六个面的距离，推到最近的外侧面
            gaps = np.concatenate([pts - low, high - pts], axis=1)
            face = np.argmin(gaps, axis=1)
            axis = face % 3
            rows = np.arange(len(pts))
            target = np.where(face < 3, low[axis], high[axis])
            pts[rows, axis] = target
            p[inside] = pts
        resting = on_plank & free
        if stick > 0 and np.any(resting):
            p[resting, 0] = x[resting, 0] + (1.0 - stick) * (p[resting, 0] - x[resting, 0])
            p[resting, 2] = x[resting, 2] + (1.0 - stick) * (p[resting, 2] - x[resting, 2])

    def _limit_strain(self, x: np.ndarray, topology: SceneTopology, pins: dict) -> np.ndarray:
        """把超过 stretch_cap 的弹簧拉回上限"""
        if topology.num_springs == 0:
            return x
        cfg = self.config
        p = x.copy()
        inv_mass = np.ones(len(p))
        for index in pins:
            inv_mass[index] = 0.0
        # 目标略低于上限，保证结束时严格满足
        target_scale = cfg.stretch_cap * (1.0 - 1e-6)
        i, j = topology.springs[:, 0], topology.springs[:, 1]
        for _ in range(cfg.strain_iterations):
            ratio = np.linalg.norm(p[j] - p[i], axis=1) / topology.rest_lengths
            if ratio.max() <= cfg.stretch_cap:
                break
            self._project_springs(p, topology, inv_mass, 1.0, target_scale=target_scale, stretch_only=True)
        else:
            ratio = np.linalg.norm(p[j] - p[i], axis=1) / topology.rest_lengths
            if ratio.max() > cfg.stretch_cap:
                logger.warning(f"Strain limit not reached: max stretch ratio {ratio.max():.4f}")
        return p


def _check_finite(state: ParticleState, where: str) -> None:
    if not np.all(np.isfinite(state.particles)):
        raise SimulationDivergenceError(f"Non-finite particle positions entering {where}")


class _EnergyMonitor:
    """
    发散检测：非有限值，或动能连续 window 个子步增长且最大粒子速度超过 max_speed
    自由落体每个子步动能都在增长，速度门限把它排除在外
    """

    def __init__(self, config: SimConfig):
        self.window = config.divergence_window
        self.max_speed = config.max_speed
        self.previous = None
        self.growth = 0

    def observe(self, v: np.ndarray, where: str) -> None:
        if not np.all(np.isfinite(v)):
            raise SimulationDivergenceError(f"Non-finite velocity at {where}")
        energy = 0.5 * float(np.sum(v * v))
        speed = float(np.sqrt(np.max(np.sum(v * v, axis=1)))) if len(v) else 0.0
        if self.previous is not None and energy > self.previous and speed > self.max_speed:
            self.growth += 1
        else:
            self.growth = 0
        self.previous = energy
        if self.growth >= self.window:
            raise SimulationDivergenceError(
                f"Kinetic energy grew for {self.growth} consecutive substeps at {where} (speed {speed:.2f} m/s)"
            )


def reset(task_id, variant: TaskVariant, sim_config: Optional[SimConfig] = None, seed: int = 0,
          num_pickers: Optional[int] = None) -> ParticleState:
    """构造初始状态 s0(v)"""
    return ParticleSimulator(task_id, sim_config).reset(variant, seed=seed, num_pickers=num_pickers)


def step_pick_place(state: ParticleState, action: PickPlaceAction,
                    sim_config: Optional[SimConfig] = None) -> ParticleState:
    """在状态所属任务上执行一次宏动作"""
    return ParticleSimulator(state.task_id, sim_config).step_pick_place(state, action)


def settle(state: ParticleState, max_substeps: Optional[int] = None,
           sim_config: Optional[SimConfig] = None) -> ParticleState:
    """静置到准静态平衡"""
    return ParticleSimulator(state.task_id, sim_config).settle(state, max_substeps)
