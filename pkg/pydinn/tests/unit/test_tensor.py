"""Module implementing unit tests for the Tensor class and its gradient tape"""

import re
from typing import Callable

import numpy as np
import pytest

from pydinn.errors import ConfigError, NumericsError, ShapeError, TapeError
from pydinn.tensor import (
    Parameter,
    Tensor,
    backward,
    broadcast_to,
    exp,
    get_dtype,
    log,
    no_grad,
    precision,
    set_precision,
    sqrt,
)


def test_tensor_copies_data_in_current_precision() -> None:
    """Unit test for Tensor creation"""
    source = np.arange(6).reshape(2, 3)
    tensor = Tensor(source)
    source[0, 0] = 100
    assert tensor.dtype == np.float32
    assert tensor.dims == [2, 3]
    assert tensor.data[0, 0] == 0


@pytest.mark.parametrize(
    "data, error",
    [
        pytest.param(np.zeros((1, 1, 1, 1, 1)), ShapeError, id="rank5"),
        pytest.param([1.0, np.nan], NumericsError, id="nan"),
        pytest.param([np.inf], NumericsError, id="inf"),
    ],
)
def test_tensor_rejects_invalid_data(data: np.ndarray, error: type) -> None:
    """Unit test for Tensor creation errors"""
    with pytest.raises(error):
        Tensor(data)


def test_precision_context_restores_previous_dtype() -> None:
    """Unit test for the precision context manager"""
    with precision(64):
        assert get_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert get_dtype() == np.float32


def test_set_precision_unsupported() -> None:
    """Unit test for set_precision with an unsupported width"""
    with pytest.raises(ConfigError, match=re.escape("Unsupported precision 16, possible values are: 32, 64")):
        set_precision(16)


def test_backward_weighted_sum() -> None:
    """loss = sum(w * x) with x fixed gives grad(w) = x"""
    x = Tensor([1.0, -2.0, 3.0])
    w = Tensor([0.5, 0.5, 0.5], requires_grad=True)
    backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x.data)
    assert x.grad is None


def test_backward_mean_squared_error() -> None:
    """loss = mean((x - t)^2) gives grad(x) = 2 (x - t) / n"""
    with precision(64):
        x = Tensor([1.0, 2.0, 4.0, -1.0], requires_grad=True)
        t = np.array([0.0, 2.0, 1.0, 1.0])
        diff = x - t
        backward((diff * diff).mean())
    np.testing.assert_allclose(x.grad, 2 * (x.data - t) / 4)


def test_backward_accumulates_over_shared_inputs() -> None:
    """A tensor used twice receives the sum of both gradient paths"""
    x = Tensor([2.0, 3.0], requires_grad=True)
    backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradients_are_reduced() -> None:
    """Gradients of broadcast operands are summed back to their dims"""
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    c = Tensor(2.0, requires_grad=True)
    backward((a * b + c).sum())
    np.testing.assert_array_equal(b.grad, np.full((1, 3), 2.0))
    assert float(c.grad) == 6.0


def test_broadcast_to_gradient() -> None:
    """broadcast_to sums the gradient over the repeated axis"""
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    backward(broadcast_to(a, (2, 4)).sum())
    np.testing.assert_array_equal(a.grad, np.full((2, 1), 4.0))
    with pytest.raises(ShapeError):
        broadcast_to(a, (3, 4))


def test_backward_frees_tape() -> None:
    """A second backward through the same loss is rejected"""
    x = Tensor([1.0], requires_grad=True)
    loss = (x * 3.0).sum()
    backward(loss)
    with pytest.raises(TapeError, match="freed"):
        backward(loss)


def test_backward_requires_scalar() -> None:
    """backward rejects non-scalar losses"""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match=re.escape("backward needs a scalar loss, got dims [2].")):
        backward(x * 2.0)


def test_backward_requires_tracked_loss() -> None:
    """backward rejects losses that do not depend on tracked tensors"""
    with pytest.raises(TapeError):
        backward(Tensor([1.0]).sum())


def test_no_grad_disables_recording() -> None:
    """Operations under no_grad do not record"""
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf


@pytest.mark.parametrize(
    "fn, derivative",
    [
        pytest.param(lambda t: t**3, lambda v: 3 * v**2, id="power"),
        pytest.param(sqrt, lambda v: 0.5 / np.sqrt(v), id="sqrt"),
        pytest.param(exp, np.exp, id="exp"),
        pytest.param(log, lambda v: 1 / v, id="log"),
        pytest.param(lambda t: 1.0 / t, lambda v: -1 / v**2, id="rdiv"),
        pytest.param(lambda t: -t, lambda v: -np.ones_like(v), id="neg"),
    ],
)
def test_elementwise_gradients(fn: Callable, derivative: Callable) -> None:
    """Unit tests for elementwise derivatives"""
    with precision(64):
        x = Tensor([0.5, 1.0, 2.5], requires_grad=True)
        backward(fn(x).sum())
    np.testing.assert_allclose(x.grad, derivative(x.data), rtol=1e-12)


def test_sqrt_gradient_at_zero() -> None:
    """The square root gradient at 0 is taken as 0"""
    x = Tensor([0.0, 4.0], requires_grad=True)
    backward(sqrt(x).sum())
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_division_by_zero_raises() -> None:
    """Non-finite results raise NumericsError"""
    with pytest.raises(NumericsError):
        Tensor([1.0]) / Tensor([0.0])


def test_getitem_scatters_gradient() -> None:
    """Indexing routes gradients back to the indexed positions"""
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x[:, 1].sum() + x[0, 1])
    np.testing.assert_array_equal(x.grad, [[0.0, 2.0, 0.0], [0.0, 1.0, 0.0]])


def test_reshape_and_mean_axes() -> None:
    """reshape accepts -1 and mean reduces the named axes"""
    x = Tensor(np.arange(8.0), requires_grad=True)
    y = x.reshape(2, -1).mean(axis=1)
    np.testing.assert_allclose(y.data, [1.5, 5.5])
    backward(y.sum())
    np.testing.assert_allclose(x.grad, np.full(8, 0.25))
    with pytest.raises(ShapeError):
        x.reshape(3, 3)


def test_parameter_is_tracked_leaf() -> None:
    """Parameters require gradients and keep their name"""
    param = Parameter(np.zeros(3), name="sat.head.w")
    assert param.requires_grad
    assert param.is_leaf
    assert "sat.head.w" in repr(param)
