"""
反向模式自动微分
每个节点保存数值和一个把上游梯度分发给父节点的闭包；backward 按拓扑逆序调用闭包
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """关闭计算图记录（推理时使用，线程局部）"""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """带梯度的 numpy 数组"""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # ndarray 与 Tensor 混合运算时交给 Tensor 的反射运算符
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Optional[Callable[[np.ndarray], None]] = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """从当前节点反向传播，梯度累加到所有 requires_grad 的叶子和中间节点"""
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data) if grad is None else np.asarray(grad))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # 运算符
    # ------------------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    return Tensor(array)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    reference = a.dtype if isinstance(a, Tensor) else b.dtype
    return as_tensor(a, reference), as_tensor(b, reference)


# ----------------------------------------------------------------------
# 逐元素二元运算
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """逐元素最小值；相等时梯度给 a"""
    a, b = _pair(a, b)
    take_a = a.data <= b.data

    def backward(g):
        a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            grad_a = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accumulate(_unbroadcast(grad_a, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                grad_b = np.multiply.outer(a.data, g)
            else:
                grad_b = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(grad_b, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


# ----------------------------------------------------------------------
# 一元运算
# ----------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: x._accumulate(g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: x._accumulate(g / x.data))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: x._accumulate(g * (1.0 - out * out)))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(out, (x,), lambda g: x._accumulate(g * out * (1.0 - out)))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    slope = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(out, (x,), lambda g: x._accumulate(g * slope))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: x._accumulate(g * mask))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: x._accumulate(g * factor))


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return _make(out, (x,), lambda g: x._accumulate(g * exponent * x.data ** (exponent - 1)))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: x._accumulate(g * 0.5 / out))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """截断；区间外梯度为 0"""
    inside = (x.data >= low) & (x.data <= high)
    return _make(np.clip(x.data, low, high), (x,), lambda g: x._accumulate(g * inside))


# ----------------------------------------------------------------------
# 归约与形状
# ----------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: x._accumulate(np.transpose(g, inverse)))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            # 高级索引可能重复，需要累加
            np.add.at(full, index, g)
        x._accumulate(full)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    reference = next(t for t in tensors if isinstance(t, Tensor)).dtype
    tensors = [as_tensor(t, reference) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    position = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:position] + (1,) + t.shape[position:]) for t in tensors]
    return concat(expanded, axis=position)


def unfold1d(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """
    一维卷积的 im2col（通道在最后）

    Args:
        x: (B, L, C)

    Returns:
        (B, L_out, kernel * C)
    """
    batch, length, channels = x.shape
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    out_length = (length + 2 * padding - kernel) // stride + 1
    windows = np.arange(out_length)[:, None] * stride + np.arange(kernel)[None, :]
    patches = padded[:, windows, :]  # (B, L_out, K, C)

    def backward(g):
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (slice(None), windows), g.reshape(batch, out_length, kernel, channels))
        x._accumulate(grad_padded[:, padding:padding + length, :])

    return _make(patches.reshape(batch, out_length, kernel * channels), (x,), backward)


def unfold2d(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """
    二维卷积的 im2col（通道在最后）

    Args:
        x: (B, H, W, C)

    Returns:
        (B, H_out, W_out, kernel * kernel * C)
    """
    batch, height, width, channels = x.shape
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    rows = (np.arange(out_h)[:, None] * stride + np.arange(kernel)[None, :])[:, None, :, None]
    cols = (np.arange(out_w)[:, None] * stride + np.arange(kernel)[None, :])[None, :, None, :]
    patches = padded[:, rows, cols, :]  # (B, H_out, W_out, K, K, C)

    def backward(g):
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (slice(None), rows, cols), g.reshape(batch, out_h, out_w, kernel, kernel, channels))
        x._accumulate(grad_padded[:, padding:padding + height, padding:padding + width, :])

    return _make(patches.reshape(batch, out_h, out_w, kernel * kernel * channels), (x,), backward)
