"""
示教学习损失
策略损失 L_pi = (1 - w_E) L_A + w_E L_E，双 Q 评论家的时序差分更新与价值估计
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from autodiff import tensor as T
from autodiff.optim import Optimizer
from autodiff.tensor import Tensor, no_grad
from errors import TrainingDivergenceError
from lfd.networks import Policy, TanhGaussianActor, TwinCritic, polyak_update
from lfd.settings import LfdConfig

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """一个训练批次；actor_inputs 为状态观测或图像"""

    observations: np.ndarray
    actor_inputs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    next_actor_inputs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return int(len(self.actions))


def _check_finite(values, what: str) -> np.ndarray:
    values = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise TrainingDivergenceError(f"Non-finite {what}")
    return values


def advantage_weights(q_values, v_values, temperature: float = 1.0, clip: float = 20.0) -> np.ndarray:
    """exp(min(A / λ, clip))，A = Q − V"""
    q = _check_finite(q_values, "critic values")
    v = _check_finite(v_values, "value estimates")
    return np.exp(np.minimum((q - v) / temperature, clip))


def advantage_weighted_loss(log_prob: Tensor, q_values, v_values, temperature: float = 1.0,
                            clip: float = 20.0) -> Tensor:
    """
    L_A：优势指数加权的负对数似然（最小化形式），权重不参与求导

    Args:
        log_prob: (B,) 数据动作的 log π(a|o)
        q_values: (B,) Q(s, a)
        v_values: (B,) V(s)
        temperature: λ
        clip: 指数上限
    """
    if len(log_prob.shape) == 0 or log_prob.shape[0] == 0:
        raise TrainingDivergenceError("Advantage-weighted loss needs a non-empty batch")
    weights = advantage_weights(q_values, v_values, temperature, clip).astype(log_prob.dtype)
    return -T.mean(log_prob * weights)


def entropy_loss(log_prob: Tensor, q_values: Tensor, alpha: float) -> Tensor:
    """L_E = mean(α log π(a|o) − Q(s, a))，a 为当前策略的重参数化采样"""
    _check_finite(q_values, "critic values")
    return T.mean(alpha * log_prob - q_values)


def policy_loss(loss_a: Tensor, loss_e: Tensor, entropy_weight: float) -> Tensor:
    """凸组合 (1 − w_E) L_A + w_E L_E"""
    return (1.0 - entropy_weight) * loss_a + entropy_weight * loss_e


def estimate_value(actor: TanhGaussianActor, critic: TwinCritic, actor_inputs: np.ndarray,
                   critic_inputs: np.ndarray, k: int = 4, rng: Optional[np.random.Generator] = None,
                   deterministic: bool = False) -> np.ndarray:
    """
    V(s) ≈ k 个策略采样动作上 min 双 Q 的均值

    Returns:
        (B,)
    """
    if k < 1:
        raise ValueError(f"Value estimate needs k >= 1, got {k}")
    dtype = actor.body.layers[0].weight.dtype
    inputs = Tensor(np.asarray(actor_inputs, dtype=dtype))
    states = Tensor(np.asarray(critic_inputs, dtype=dtype))
    with no_grad():
        if deterministic:
            return critic.min_q(states, actor.mean_action(inputs).astype(dtype)).data.astype(np.float64)
        total = np.zeros(len(critic_inputs))
        for _ in range(k):
            action, _ = actor.sample(inputs, rng)
            total += critic.min_q(states, action).data
    return total / k


def td_target(rewards, dones, next_q1, next_q2, next_log_prob, gamma: float, alpha: float) -> np.ndarray:
    """y = r + γ (1 − d) (min(Q1', Q2') − α log π(a'|o'))"""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    bootstrap = np.minimum(np.asarray(next_q1, dtype=np.float64), np.asarray(next_q2, dtype=np.float64))
    bootstrap = bootstrap - alpha * np.asarray(next_log_prob, dtype=np.float64)
    # 终止元组不使用自举项，避免 0 · inf
    target = rewards + np.where(dones > 0.5, 0.0, gamma * (1.0 - dones) * bootstrap)
    return _check_finite(target, "TD targets")


def critic_loss(q1: Tensor, q2: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target).astype(q1.dtype)
    d1 = q1 - target
    d2 = q2 - target
    return T.mean(d1 * d1) + T.mean(d2 * d2)


def compute_critic_loss(policy: Policy, batch: Batch, config: LfdConfig,
                        rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> Tensor:
    """双 Q 的平方时序差分误差；目标由目标评论家与当前策略给出"""
    dtype = policy.dtype
    with no_grad():
        next_action, next_log_prob = policy.actor.sample(
            Tensor(np.asarray(batch.next_actor_inputs, dtype=dtype)), rng, noise
        )
        next_q1, next_q2 = policy.target_critic(Tensor(np.asarray(batch.next_observations, dtype=dtype)), next_action)
    target = td_target(batch.rewards, batch.dones, next_q1.data, next_q2.data, next_log_prob.data,
                       config.gamma, config.entropy_coefficient)
    q1, q2 = policy.critic(Tensor(np.asarray(batch.observations, dtype=dtype)), np.asarray(batch.actions, dtype=dtype))
    return critic_loss(q1, q2, target)


def critic_update(policy: Policy, batch: Batch, config: LfdConfig, optimizer: Optimizer,
                  rng: Optional[np.random.Generator] = None) -> float:
    """一次评论家梯度更新，之后对目标评论家做 polyak 平均"""
    optimizer.zero_grad()
    loss = compute_critic_loss(policy, batch, config, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"Critic loss became {value}")
    loss.backward()
    optimizer.step()
    polyak_update(policy.target_critic, policy.critic, config.target_update_rate)
    return value


def compute_policy_loss(policy: Policy, batch: Batch, config: LfdConfig,
                        rng: Optional[np.random.Generator] = None,
                        noise: Optional[np.ndarray] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    批次上的策略损失

    Returns:
        (L_pi, {loss_a, loss_e, mean_advantage})
    """
    dtype = policy.dtype
    inputs = Tensor(np.asarray(batch.actor_inputs, dtype=dtype))
    states = Tensor(np.asarray(batch.observations, dtype=dtype))

    with no_grad():
        q_data = policy.critic.min_q(states, np.asarray(batch.actions, dtype=dtype)).data
    v_data = estimate_value(policy.actor, policy.critic, batch.actor_inputs, batch.observations,
                            config.value_samples, rng)
    loss_a = advantage_weighted_loss(policy.actor.log_prob(inputs, batch.actions), q_data, v_data,
                                     config.advantage_temperature, config.advantage_clip)
    info = {"loss_a": loss_a.item(), "mean_advantage": float(np.mean(q_data - v_data))}
    if config.entropy_weight == 0.0:
        info["loss_e"] = float("nan")
        return loss_a, info

    action, log_prob = policy.actor.sample(inputs, rng, noise)
    loss_e = entropy_loss(log_prob, policy.critic.min_q(states, action), config.entropy_coefficient)
    info["loss_e"] = loss_e.item()
    return policy_loss(loss_a, loss_e, config.entropy_weight), info


def actor_update(policy: Policy, batch: Batch, config: LfdConfig, optimizer: Optimizer,
                 rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    optimizer.zero_grad()
    loss, info = compute_policy_loss(policy, batch, config, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"Policy loss became {value}")
    loss.backward()
    optimizer.step()
    info["loss"] = value
    return info
