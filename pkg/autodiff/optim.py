"""
优化器
"""
import enum
import logging
from typing import List

import numpy as np

from autodiff.tensor import Tensor
from errors import OptimizerError

logger = logging.getLogger(__name__)


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class Optimizer:
    def __init__(self, params: List[Tensor], lr: float):
        if lr <= 0:
            raise OptimizerError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """随机梯度下降，可选动量"""

    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data = p.data - self.lr * v
            else:
                p.data = p.data - self.lr * p.grad


class Adam(Optimizer):
    def __init__(self, params: List[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def clip_grad_norm(params: List[Tensor], max_norm: float) -> float:
    """按全局范数裁剪梯度，返回裁剪前范数"""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def build_optimizer(kind: str, params: List[Tensor], lr: float, momentum: float = 0.0) -> Optimizer:
    try:
        selected = OptimizerKind(kind)
    except ValueError:
        raise OptimizerError(f"Unknown optimizer: {kind}")
    if selected == OptimizerKind.SGD:
        return SGD(params, lr, momentum)
    return Adam(params, lr)
