"""
动力学模型评估
位移 MSE、chamfer 误差比、模型与仿真器吞吐量
"""
import logging
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from autodiff.tensor import no_grad
from dynamics.model import DynamicsModel, DynamicsParams
from dynamics.trainer import evaluate_loss, zero_predictor_loss
from sim.engine import ParticleSimulator
from sim.geometry import chamfer_distance
from sim.settings import SimConfig
from tasks.teacher import Trajectory

logger = logging.getLogger(__name__)


def _stats(values: Sequence[float]) -> Dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}


def _episode_arrays(episodes: List[Trajectory]):
    positions = np.stack([[s.particles for s in e.states] for e in episodes])
    actions = np.stack([[a.to_vector() for a in e.actions] for e in episodes])
    return positions, actions


def one_step_chamfer_ratios(model: DynamicsModel, positions: np.ndarray, actions: np.ndarray) -> List[float]:
    """每个回合：sum_t chamfer(预测 P_t+1, 真实 P_t+1) / sum_t chamfer(P_t, P_t+1)"""
    with no_grad():
        predicted = model.forward_sequence(positions[:, :-1], actions).data.astype(np.float64)
    ratios = []
    for e in range(len(positions)):
        error = movement = 0.0
        for t in range(actions.shape[1]):
            error += chamfer_distance(positions[e, t] + predicted[e, t], positions[e, t + 1])
            movement += chamfer_distance(positions[e, t], positions[e, t + 1])
        if movement > 0:
            ratios.append(error / movement)
    return ratios


def rollout_chamfer_ratios(model: DynamicsModel, positions: np.ndarray, actions: np.ndarray) -> List[float]:
    """开环推演的最终状态误差 / 真实仿真的总移动"""
    ratios = []
    for e in range(len(positions)):
        predicted = model.rollout_batch(positions[e, 0], actions[e:e + 1])[0]
        movement = chamfer_distance(positions[e, 0], positions[e, -1])
        if movement > 0:
            ratios.append(chamfer_distance(predicted[-1], positions[e, -1]) / movement)
    return ratios


def measure_throughput(model: DynamicsModel, episodes: List[Trajectory], sim_config: Optional[SimConfig] = None):
    """相同工作量（同一组起始状态与动作）下模型与仿真器每秒步数"""
    positions, actions = _episode_arrays(episodes)
    steps = actions.shape[0] * actions.shape[1]

    started = time.perf_counter()
    model.rollout_batch(positions[:, 0], actions)
    model_elapsed = time.perf_counter() - started

    simulator = ParticleSimulator(episodes[0].states[0].task_id, sim_config)
    started = time.perf_counter()
    for episode in episodes:
        state = episode.states[0]
        for action in episode.actions:
            state = simulator.step_pick_place(state, action)
    sim_elapsed = time.perf_counter() - started
    return steps / max(model_elapsed, 1e-9), steps / max(sim_elapsed, 1e-9)


def evaluate_dynamics(params: DynamicsParams, heldout: List[Trajectory],
                      sim_config: Optional[SimConfig] = None, measure_speed: bool = True) -> Dict:
    """
    评估动力学模型

    Args:
        params: 模型参数
        heldout: 验证回合（与训练集不相交）
        sim_config: 仿真配置（吞吐量对比使用）
        measure_speed: 是否测量吞吐量

    Returns:
        指标字典
    """
    model = DynamicsModel.from_params(params)
    if not heldout:
        return {"mse": float("nan"), "episodes": 0}
    positions, actions = _episode_arrays(heldout)
    targets = positions[:, 1:] - positions[:, :-1]

    one_step = one_step_chamfer_ratios(model, positions, actions)
    rollout = rollout_chamfer_ratios(model, positions, actions)
    metrics = {
        "episodes": len(heldout),
        "mse": evaluate_loss(model, positions[:, :-1], actions, targets, batch_episodes=64),
        "zero_baseline_mse": zero_predictor_loss(targets),
        "chamfer_ratio": _stats(one_step),
        "rollout_chamfer_ratio": _stats(rollout),
    }
    if measure_speed:
        model_rate, sim_rate = measure_throughput(model, heldout, sim_config)
        metrics["steps_per_second_model"] = model_rate
        metrics["steps_per_second_sim"] = sim_rate
        metrics["speedup"] = model_rate / sim_rate
    logger.info(
        f"Dynamics evaluation: mse {metrics['mse']:.6g} (zero {metrics['zero_baseline_mse']:.6g}), "
        f"chamfer ratio {metrics['chamfer_ratio']['mean']:.3f}, rollout ratio {metrics['rollout_chamfer_ratio']['mean']:.3f}"
    )
    return metrics
