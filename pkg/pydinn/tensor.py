"""Module implementing the Tensor type and its reverse-mode gradient tape.

Every differentiable operation computes its output with numpy and registers a backward
closure mapping the output gradient to one gradient per parent. ``backward`` replays the
closures in reverse topological order and frees the tape afterwards.
"""

import contextlib
import logging
import threading
from typing import Any, Callable, Dict, Generator, List, Optional, Sequence, Tuple, Union

import numpy as np

from pydinn.errors import ConfigError, NumericsError, ShapeError, TapeError

logger = logging.getLogger(__name__)

MAX_RANK = 4

DTYPES: Dict[int, np.dtype] = {
    32: np.dtype("float32"),  # Default compute precision.
    64: np.dtype("float64"),  # Gradient checking.
}

_precision = {"dtype": DTYPES[32]}
_grad_mode = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


def set_precision(bits: int) -> None:
    """Sets the build-wide floating point precision of newly created tensors.

    Parameters
    ----------
    bits : int
        32 or 64.
    :raises ConfigError: if bits is not a supported precision.
    """
    try:
        _precision["dtype"] = DTYPES[bits]
    except KeyError:
        raise ConfigError(
            f"Unsupported precision {bits}, possible values are: {', '.join(str(key) for key in DTYPES)}"
        ) from KeyError


def get_dtype() -> np.dtype:
    """Returns the dtype used for newly created tensors."""
    return _precision["dtype"]


@contextlib.contextmanager
def precision(bits: int) -> Generator:
    """Temporarily switches the build-wide precision, e.g. ``with precision(64):`` for gradient checks."""
    previous = get_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _precision["dtype"] = previous


def is_grad_enabled() -> bool:
    """Whether operations in the current thread record onto the tape."""
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Generator:
    """Disables tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.isfinite(array).all():
        raise NumericsError(f"Non-finite values produced by {where}.")


def _check_rank(array: np.ndarray, where: str) -> None:
    if array.ndim > MAX_RANK:
        raise ShapeError(f"{where} produced rank {array.ndim}, at most {MAX_RANK} dimensions are supported.")


class Tensor:
    """Tensor class.

    data : np.ndarray
        Row-major values, NCHW layout for rank-4 tensors.
    requires_grad : bool
        Whether gradients are tracked for this tensor.
    grad : Optional[np.ndarray]
        Accumulated gradient of the last backward pass(es), same dims as data.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_freed")
    # Makes numpy defer to the reflected operators below.
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[np.dtype] = None) -> None:
        """Creates a leaf tensor holding a copy of data in the current precision.

        Parameters
        ----------
        data : ArrayLike
            Values; a Tensor is copied without its tape.
        requires_grad : bool
            Whether backward passes should fill ``grad``.
        dtype : Optional[np.dtype]
            Overrides the build-wide precision.
        :raises ShapeError: if data has more than four dimensions.
        :raises NumericsError: if data holds NaN or Inf.
        """
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=dtype or get_dtype())
        _check_rank(array, "Tensor creation")
        _check_finite(array, "Tensor creation")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._op = "leaf"
        self._freed = False

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the tensor as a tuple."""
        return self.data.shape

    @property
    def dims(self) -> List[int]:
        """Dims of the tensor as a list."""
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        """Rank of the tensor."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of stored values."""
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        """Numpy dtype of the stored values."""
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """True if the tensor was not produced by a recorded operation."""
        return self._backward_fn is None

    def numpy(self) -> np.ndarray:
        """Returns the underlying array (no copy)."""
        return self.data

    def item(self) -> float:
        """Returns the value of a single-element tensor as a float."""
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Returns a constant tensor sharing the values but not the tape."""
        return _constant(self.data)

    def zero_grad(self) -> None:
        """Drops the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Runs reverse-mode differentiation from this scalar, see ``backward``."""
        backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.array(grad, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        """See ``sum``."""
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        """See ``mean``."""
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        """See ``reshape``."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Parameter class.

    A trainable leaf tensor with a dotted name path such as ``sat.enc.block3.conv1.w``.
    """

    __slots__ = ("name",)

    def __init__(self, data: ArrayLike, name: str = "") -> None:
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, dims={self.dims}, requires_grad={self.requires_grad})"


def _constant(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out._op = "constant"
    out._freed = False
    return out


def as_tensor(value: ArrayLike) -> Tensor:
    """Returns value unchanged if it is a Tensor, otherwise a constant Tensor of it."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wraps the result of an operation and puts it on the tape if any parent is tracked.

    Parameters
    ----------
    data : np.ndarray
        Output values.
    parents : Tuple[Tensor, ...]
        Operation inputs, in the order backward_fn returns their gradients.
    backward_fn : BackwardFn
        Maps the output gradient to one gradient (or None) per parent.
    op : str
        Operation name used in error messages.
    Returns
    ----------
    : Tensor
        The output tensor.
    :raises NumericsError: if the output holds NaN or Inf.
    """
    data = np.asarray(data)
    _check_rank(data, op)
    _check_finite(data, op)
    out = _constant(data)
    out._op = op
    if is_grad_enabled() and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    """Tracked tensors reachable from root, every tensor listed after its parents."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulates d(loss)/d(t) into ``t.grad`` for every tracked leaf t reachable from loss.

    The tape is single-use: recorded intermediates are released once the pass completes.

    Parameters
    ----------
    loss : Tensor
        Single-element tensor built from recorded operations.
    :raises ShapeError: if loss holds more than one value.
    :raises TapeError: if the tape of loss was already consumed or loss is not tracked.
    """
    if loss._freed:
        raise TapeError("The tape of this loss was freed by a previous backward call.")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}.")
    if not loss.requires_grad:
        raise TapeError("The loss does not depend on any tensor that requires a gradient.")
    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward_fn is None:
            node._accumulate(grad)
            continue
        for parent, parent_grad in zip(node._parents, node._backward_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    for node in order:
        if node._backward_fn is not None:
            node._parents = ()
            node._backward_fn = None
            node._freed = True
            node.requires_grad = False
    logger.debug("backward released %d recorded tensors", len(order))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums grad over the axes along which an operand of the given shape was broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise a + b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return record(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise a - b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)

    return record(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise a * b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)

    return record(a.data * b.data, (a, b), _backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise a / b with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(grad / b.data, a.shape), unbroadcast(-grad * out / b.data, b.shape)

    return record(out, (a, b), _backward, "div")


def neg(a: ArrayLike) -> Tensor:
    """Elementwise -a."""
    a = as_tensor(a)
    return record(-a.data, (a,), lambda grad: (-grad,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
    """Elementwise a ** exponent for a constant exponent."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**exponent

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * exponent * a.data ** (exponent - 1),)

    return record(out, (a,), _backward, "power")


def sqrt(a: ArrayLike) -> Tensor:
    """Elementwise square root; the gradient at 0 is taken as 0."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.divide(0.5 * grad, out, out=np.zeros_like(out), where=out > 0),)

    return record(out, (a,), _backward, "sqrt")


def exp(a: ArrayLike) -> Tensor:
    """Elementwise exponential."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record(out, (a,), lambda grad: (grad * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    """Elementwise natural logarithm."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record(out, (a,), lambda grad: (grad / a.data,), "log")


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def sum(  # pylint: disable=redefined-builtin
    a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    """Sum over the given axes (all by default)."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, a.shape),)

    return record(out, (a,), _backward, "sum")


def mean(a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over the given axes (all by default)."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Row-major reshape."""
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"Cannot reshape dims {a.dims} into {list(shape)}.") from err
    return record(out, (a,), lambda grad: (grad.reshape(a.shape),), "reshape")


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    """Broadcasts a to shape; the gradient sums over the broadcast axes."""
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError as err:
        raise ShapeError(f"Cannot broadcast dims {a.dims} to {list(shape)}.") from err
    return record(out, (a,), lambda grad: (unbroadcast(grad, a.shape),), "broadcast_to")


def getitem(a: ArrayLike, index: Any) -> Tensor:
    """Numpy-style indexing; the gradient scatters back into the indexed positions."""
    a = as_tensor(a)
    out = a.data[index]

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        return (full,)

    return record(np.array(out), (a,), _backward, "getitem")
