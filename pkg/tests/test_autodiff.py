"""
自动微分梯度检查（float64 有限差分）
"""
import numpy as np
import pytest

from autodiff import tensor as T
from autodiff.layers import MLP, Conv1d, Conv2d, LayerNorm, Linear, LSTMCell
from autodiff.optim import SGD, Adam, build_optimizer, clip_grad_norm
from autodiff.tensor import Tensor, no_grad
from errors import OptimizerError

EPS = 1e-6


def _numeric_grad(fn, array: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + EPS
        plus = fn()
        array[index] = original - EPS
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * EPS)
    return grad


def _check_input_grad(op, shape, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    weights = rng.normal(size=op(Tensor(data)).shape)

    x = Tensor(data, requires_grad=True)
    (op(x) * weights).sum().backward()
    numeric = _numeric_grad(lambda: float(np.sum(op(Tensor(data)).data * weights)), data)
    assert np.allclose(x.grad, numeric, atol=1e-6, rtol=1e-5)


def _check_module_grad(module, inputs_fn, seed=0):
    module.astype(np.float64)
    out_shape = inputs_fn().shape
    weights = np.random.default_rng(seed).normal(size=out_shape)
    module.zero_grad()
    (inputs_fn() * weights).sum().backward()
    for name, param in module.named_parameters():
        numeric = _numeric_grad(lambda: float(np.sum(inputs_fn().data * weights)), param.data)
        assert np.allclose(param.grad, numeric, atol=1e-6, rtol=1e-5), name


@pytest.mark.parametrize("op, positive", [
    (lambda x: x * x + 3.0 * x, False),
    (lambda x: (x - 1.0) / (x * x + 1.0), False),
    (T.exp, False),
    (T.log, True),
    (T.tanh, False),
    (T.sigmoid, False),
    (T.softplus, False),
    (T.sqrt, True),
    (lambda x: T.power(x, 1.5), True),
    (lambda x: T.leaky_relu(x, 0.2), False),
    (lambda x: T.mean(x, axis=0), False),
    (lambda x: x.sum(axis=1, keepdims=True), False),
    (lambda x: T.transpose(x, (1, 0)), False),
    (lambda x: x[:, 1:], False),
    (lambda x: x[[0, 0, 2]], False),
    (lambda x: T.concat([x, x * 2.0], axis=0), False),
    (lambda x: T.stack([x, x], axis=1), False),
    (lambda x: T.minimum(x, x * 0.5), True),
])
def test_elementwise_gradients(op, positive):
    _check_input_grad(op, (3, 4), positive=positive)


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(4, 2))
    _check_input_grad(lambda x: x @ Tensor(b), (3, 4))
    a = rng.normal(size=(3, 4))
    _check_input_grad(lambda x: Tensor(a) @ x, (4, 2))


def test_broadcast_gradient_is_summed():
    bias = Tensor(np.zeros(4), requires_grad=True)
    (Tensor(np.ones((5, 4))) + bias).sum().backward()
    assert np.allclose(bias.grad, 5.0)


def test_unfold1d_gradient():
    _check_input_grad(lambda x: T.unfold1d(x, kernel=3, stride=2, padding=1), (2, 7, 3))


def test_unfold2d_gradient():
    _check_input_grad(lambda x: T.unfold2d(x, kernel=3, stride=2, padding=1), (2, 5, 5, 2))


def test_unfold2d_matches_direct_convolution():
    rng = np.random.default_rng(2)
    image = rng.normal(size=(1, 4, 4, 1))
    patches = T.unfold2d(Tensor(image), kernel=2, stride=1, padding=0).data
    assert patches.shape == (1, 3, 3, 4)
    assert np.allclose(patches[0, 1, 2], image[0, 1:3, 2:4, 0].reshape(-1))


def test_linear_gradient():
    layer = Linear(4, 3, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 4))
    _check_module_grad(layer, lambda: layer(Tensor(x)))


def test_conv1d_gradient():
    layer = Conv1d(3, 2, kernel=3, stride=1, padding=1, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 6, 3))
    _check_module_grad(layer, lambda: layer(Tensor(x)))


def test_conv2d_gradient():
    layer = Conv2d(2, 3, kernel=3, stride=2, padding=1, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 5, 5, 2))
    out = layer(Tensor(x))
    assert out.shape == (2, 3, 3, 3)
    _check_module_grad(layer, lambda: layer(Tensor(x)))


def test_layer_norm_gradient():
    layer = LayerNorm(4)
    layer.gamma.data = np.array([1.0, 2.0, 0.5, -1.0])
    x = np.random.default_rng(1).normal(size=(3, 4))
    _check_module_grad(layer, lambda: layer(Tensor(x)))


def test_lstm_gradient():
    cell = LSTMCell(3, 4, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 3))

    def run():
        state = cell.initial_state(2, np.float64)
        h, c = cell(Tensor(x), state)
        h, c = cell(Tensor(x * 0.5), (h, c))
        return h + c

    _check_module_grad(cell, run)


def test_mlp_zero_last_outputs_zero():
    mlp = MLP([4, 8, 3], np.random.default_rng(0), zero_last=True)
    out = mlp(Tensor(np.random.default_rng(1).normal(size=(2, 4)).astype(np.float32)))
    assert np.array_equal(out.data, np.zeros((2, 3), dtype=np.float32))


def test_state_vector_round_trip():
    a = MLP([3, 5, 2], np.random.default_rng(0))
    b = MLP([3, 5, 2], np.random.default_rng(1))
    b.copy_from(a)
    assert np.array_equal(a.state_vector(), b.state_vector())
    with pytest.raises(ValueError):
        b.load_vector(np.zeros(3))


def test_no_grad_skips_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ============ 优化器 ============

def _quadratic_steps(optimizer_cls, **kwargs):
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    optimizer = optimizer_cls([x], **kwargs)
    for _ in range(200):
        optimizer.zero_grad()
        (x * x).sum().backward()
        optimizer.step()
    return x.data


def test_sgd_and_adam_minimize_quadratic():
    assert np.allclose(_quadratic_steps(SGD, lr=0.1), 0.0, atol=1e-6)
    assert np.allclose(_quadratic_steps(SGD, lr=0.05, momentum=0.9), 0.0, atol=1e-3)
    assert np.allclose(_quadratic_steps(Adam, lr=0.1), 0.0, atol=0.05)


def test_clip_grad_norm():
    x = Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([x], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(x.grad) == pytest.approx(1.0)


def test_build_optimizer_rejects_unknown():
    with pytest.raises(OptimizerError):
        build_optimizer("rmsprop", [], 0.1)
    with pytest.raises(OptimizerError):
        build_optimizer("sgd", [], 0.0)
