"""
网络层
"""
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from autodiff import tensor as T
from autodiff.tensor import Tensor


def parameter(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """参数容器；按属性定义顺序收集参数"""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        """原地转换参数精度（梯度检查使用 float64）"""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_vector(self) -> np.ndarray:
        params = self.parameters()
        if not params:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([p.data.reshape(-1) for p in params])

    def load_vector(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector)
        if vector.size != self.num_parameters:
            raise ValueError(f"Parameter vector has {vector.size} entries, module expects {self.num_parameters}")
        offset = 0
        for p in self.parameters():
            size = p.data.size
            p.data = vector[offset:offset + size].reshape(p.shape).astype(p.dtype)
            offset += size

    def copy_from(self, other: "Module") -> None:
        self.load_vector(other.state_vector())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            self.weight = parameter(np.zeros((in_features, out_features)))
        else:
            self.weight = parameter(_uniform(rng, in_features, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv1d(Module):
    """沿粒子轴的一维卷积，输入输出均为 (B, L, C)"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = kernel * in_channels
        self.weight = parameter(_uniform(rng, fan_in, (fan_in, out_channels)))
        self.bias = parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.unfold1d(x, self.kernel, self.stride, self.padding) @ self.weight + self.bias


class Conv2d(Module):
    """图像卷积，输入输出均为 (B, H, W, C)"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = kernel * kernel * in_channels
        self.weight = parameter(_uniform(rng, fan_in, (fan_in, out_channels)))
        self.bias = parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.unfold2d(x, self.kernel, self.stride, self.padding) @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        centered = x - T.mean(x, axis=-1, keepdims=True)
        variance = T.mean(centered * centered, axis=-1, keepdims=True)
        return centered / T.sqrt(variance + self.eps) * self.gamma + self.beta


class LSTMCell(Module):
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.input_weight = parameter(_uniform(rng, hidden_size, (input_size, 4 * hidden_size)))
        self.hidden_weight = parameter(_uniform(rng, hidden_size, (hidden_size, 4 * hidden_size)))
        bias = np.zeros(4 * hidden_size)
        # 遗忘门偏置初始化为 1
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = parameter(bias)

    def initial_state(self, batch: int, dtype=np.float32) -> Tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.hidden_size), dtype=dtype)
        return Tensor(zeros), Tensor(zeros.copy())

    def forward(self, x: Tensor, state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        h, c = state
        gates = x @ self.input_weight + h @ self.hidden_weight + self.bias
        n = self.hidden_size
        i = T.sigmoid(gates[..., 0:n])
        f = T.sigmoid(gates[..., n:2 * n])
        g = T.tanh(gates[..., 2 * n:3 * n])
        o = T.sigmoid(gates[..., 3 * n:4 * n])
        c_next = f * c + i * g
        h_next = o * T.tanh(c_next)
        return h_next, c_next


class MLP(Module):
    """全连接网络，隐藏层使用给定激活"""

    def __init__(self, sizes: List[int], rng: np.random.Generator,
                 activation: Callable[[Tensor], Tensor] = T.relu,
                 final_activation: Optional[Callable[[Tensor], Tensor]] = None,
                 zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero_init=zero_last and index == len(sizes) - 2)
            for index, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation
        self.final_activation = final_activation

    def forward(self, x: Tensor) -> Tensor:
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < len(self.layers) - 1:
                x = self.activation(x)
        if self.final_activation is not None:
            x = self.final_activation(x)
        return x
