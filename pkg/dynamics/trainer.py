"""
动力学模型训练
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from autodiff import tensor as T
from autodiff.optim import build_optimizer, clip_grad_norm
from autodiff.tensor import Tensor, no_grad
from dynamics.arch import ArchConfig, DynamicsTrainConfig
from dynamics.dataset import RandomDataset
from dynamics.model import DynamicsModel, DynamicsParams
from errors import EmptyDatasetError, TrainingDivergenceError
from progress_manager import progress_manager
from utils.seeding import derive_rng

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    heldout_loss: float


@dataclass
class DynamicsTrainReport:
    """训练报告：每轮训练/验证损失与零位移基线"""

    epochs: List[EpochRecord] = field(default_factory=list)
    zero_baseline_loss: float = 0.0
    initial_train_loss: float = 0.0
    # 训练结束后在训练集上的损失
    final_fit_loss: float = 0.0
    train_episodes: List[int] = field(default_factory=list)
    heldout_episodes: List[int] = field(default_factory=list)
    duration_seconds: float = 0.0

    @property
    def final_train_loss(self) -> float:
        return self.epochs[-1].train_loss if self.epochs else self.initial_train_loss

    @property
    def final_heldout_loss(self) -> float:
        return self.epochs[-1].heldout_loss if self.epochs else float("nan")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["final_train_loss"] = self.final_train_loss
        data["final_heldout_loss"] = self.final_heldout_loss
        return data


def displacement_loss(model: DynamicsModel, positions: np.ndarray, actions: np.ndarray,
                      targets: np.ndarray) -> Tensor:
    """平均（每粒子每步）位移误差平方"""
    predicted = model.forward_sequence(positions, actions)
    diff = predicted - targets.astype(predicted.dtype)
    return T.mean(T.tsum(diff * diff, axis=-1))


def zero_predictor_loss(targets: np.ndarray) -> float:
    return float(np.mean(np.sum(targets.astype(np.float64) ** 2, axis=-1)))


def split_episodes(count: int, heldout_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """按种子把回合切分为训练/验证集"""
    order = derive_rng(seed, 0x5B).permutation(count)
    if count < 2:
        return order, order[:0]
    heldout = min(count - 1, max(1, int(round(heldout_fraction * count))))
    return np.sort(order[heldout:]), np.sort(order[:heldout])


def evaluate_loss(model: DynamicsModel, positions, actions, targets, batch_episodes: int) -> float:
    if len(positions) == 0:
        return float("nan")
    total, weight = 0.0, 0
    with no_grad():
        for start in range(0, len(positions), batch_episodes):
            stop = start + batch_episodes
            loss = displacement_loss(model, positions[start:stop], actions[start:stop], targets[start:stop])
            total += loss.item() * (min(stop, len(positions)) - start)
            weight += min(stop, len(positions)) - start
    return total / weight


def train_dynamics(dataset: RandomDataset, arch: Optional[ArchConfig] = None,
                   config: Optional[DynamicsTrainConfig] = None, seed: int = 0,
                   dtype=np.float32) -> Tuple[DynamicsParams, DynamicsTrainReport]:
    """
    在随机动作数据集上训练动力学模型

    Args:
        dataset: 随机动作数据集
        arch: 网络结构
        config: 训练配置
        seed: 随机种子（初始化、切分、打乱）
        dtype: 训练精度

    Returns:
        (DynamicsParams, DynamicsTrainReport)
    """
    arch = arch or ArchConfig()
    config = config or DynamicsTrainConfig()
    if len(dataset.episodes) == 0:
        raise EmptyDatasetError("Random dataset is empty")

    positions, actions, targets = dataset.arrays()
    model = DynamicsModel(dataset.task_id, arch, positions.shape[2], dataset.num_pickers, seed=seed)
    model.network.astype(dtype)
    optimizer = build_optimizer(config.optimizer, model.network.parameters(), config.lr, config.momentum)

    train_idx, heldout_idx = split_episodes(len(positions), config.heldout_fraction, seed)
    horizon = positions.shape[1]
    batch_episodes = max(1, config.batch_size // horizon)
    report = DynamicsTrainReport(
        train_episodes=train_idx.tolist(),
        heldout_episodes=heldout_idx.tolist(),
        zero_baseline_loss=zero_predictor_loss(targets[heldout_idx]) if len(heldout_idx) else float("nan"),
    )
    report.initial_train_loss = evaluate_loss(
        model, positions[train_idx], actions[train_idx], targets[train_idx], batch_episodes
    )
    started = time.perf_counter()
    logger.info(
        f"Training {arch.variant.value} dynamics on {len(train_idx)} episodes "
        f"({len(heldout_idx)} held out), {model.network.num_parameters} parameters"
    )

    for epoch in range(config.epochs):
        order = train_idx[derive_rng(seed, 0xE0, epoch).permutation(len(train_idx))]
        total, weight = 0.0, 0
        for start in range(0, len(order), batch_episodes):
            batch = order[start:start + batch_episodes]
            optimizer.zero_grad()
            loss = displacement_loss(model, positions[batch], actions[batch], targets[batch])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergenceError(f"Dynamics loss became {value} at epoch {epoch}")
            loss.backward()
            if config.grad_clip:
                clip_grad_norm(optimizer.params, config.grad_clip)
            optimizer.step()
            total += value * len(batch)
            weight += len(batch)

        heldout = evaluate_loss(model, positions[heldout_idx], actions[heldout_idx], targets[heldout_idx], batch_episodes)
        record = EpochRecord(epoch, total / weight, heldout)
        report.epochs.append(record)
        logger.debug(f"Epoch {epoch}: train {record.train_loss:.6g}, heldout {record.heldout_loss:.6g}")
        progress_manager.update_progress(
            "train-dynamics", epoch + 1, config.epochs, train_loss=record.train_loss, heldout_loss=heldout
        )

    report.duration_seconds = time.perf_counter() - started
    report.final_fit_loss = evaluate_loss(
        model, positions[train_idx], actions[train_idx], targets[train_idx], batch_episodes
    )
    model.metadata = {
        "epochs": config.epochs,
        "final_loss": report.final_fit_loss,
        "final_heldout_loss": report.final_heldout_loss,
        "seed": seed,
        "optimizer": config.optimizer,
        "lr": config.lr,
    }
    logger.info(
        f"Dynamics training finished: train {report.final_train_loss:.6g}, "
        f"heldout {report.final_heldout_loss:.6g}, zero baseline {report.zero_baseline_loss:.6g}"
    )
    return model.to_params(), report
