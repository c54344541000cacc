"""Module implementing the differentiable network primitives.

Convolutions are computed over strided window views (im2col without the copy) and
contracted with ``np.tensordot``; the transposed convolution is the exact adjoint of
``conv2d`` and shares its scatter-accumulate helper.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from pydinn.errors import DegenerateBatchError, ShapeError
from pydinn.tensor import ArrayLike, Tensor, as_tensor, record


class PoolKind(Enum):
    """PoolKind enum."""

    avg = "avg"
    max = "max"


class ActivationKind(Enum):
    """ActivationKind enum."""

    relu = "relu"
    sigmoid = "sigmoid"
    tanh = "tanh"


@dataclass
class RunningStats:
    """Batch normalization running statistics of one layer.

    Updated in place by ``batchnorm2d`` in training mode, read in eval mode.
    """

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype: Optional[np.dtype] = None) -> "RunningStats":
        """Running stats of a fresh layer: mean 0, variance 1."""
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


@dataclass
class _ConvGeometry:
    kh: int
    kw: int
    stride: int
    padding: int
    out_h: int
    out_w: int
    padded: Tuple[int, int] = (0, 0)


def _expect_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have {rank} dimensions, got dims {x.dims}.")


def _pad(data: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view [N, C, H', W', kh, kw] of every kernel position."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter(cols: np.ndarray, height: int, width: int, stride: int) -> np.ndarray:
    """Adds per-position kernel patches cols [N, H', W', C, kh, kw] into an [N, C, height, width] map."""
    n, out_h, out_w, channels, kh, kw = cols.shape
    out = np.zeros((n, channels, height, width), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def _conv_geometry(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int) -> _ConvGeometry:
    _expect_rank(x, 4, "conv2d input")
    _expect_rank(w, 4, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got stride {stride}, padding {padding}.")
    _, channels, height, width = x.shape
    out_channels, in_channels, kh, kw = w.shape
    if in_channels != channels:
        raise ShapeError(f"conv2d kernel expects {in_channels} input channels, input has dims {x.dims}.")
    if b is not None and b.shape != (out_channels,):
        raise ShapeError(f"conv2d bias must have dims [{out_channels}], got {b.dims}.")
    padded_h, padded_w = height + 2 * padding, width + 2 * padding
    if padded_h < kh or padded_w < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} is larger than the padded input {padded_h}x{padded_w}.")
    if (padded_h - kh) % stride or (padded_w - kw) % stride:
        raise ShapeError(
            f"conv2d output size is not integral for input {height}x{width}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}."
        )
    return _ConvGeometry(
        kh=kh,
        kw=kw,
        stride=stride,
        padding=padding,
        out_h=(padded_h - kh) // stride + 1,
        out_w=(padded_w - kw) // stride + 1,
        padded=(padded_h, padded_w),
    )


def conv2d(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Kernels of any size are accepted, even ones included (2x2 with stride 2 halves the input).
    Only "same" padding, p = (k - 1) / 2, needs an odd kernel.

    Parameters
    ----------
    x : Tensor
        Input [N, Cin, H, W].
    w : Tensor
        Kernel [Cout, Cin, kh, kw].
    b : Optional[Tensor]
        Bias [Cout].
    stride : int
        Step between kernel positions.
    padding : int
        Zero padding added on every border.
    Returns
    ----------
    : Tensor
        Output [N, Cout, (H+2p-kh)/stride+1, (W+2p-kw)/stride+1].
    :raises ShapeError: on mismatching channels or a non-integral output size.
    """
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(b) if b is not None else None
    geometry = _conv_geometry(x, w, bias, stride, padding)
    windows = _windows(_pad(x.data, padding), geometry.kh, geometry.kw, stride)
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(grad, w.data, axes=([1], [0]))
        padded_h, padded_w = geometry.padded
        grad_x = _scatter(cols, padded_h, padded_w, stride)
        grad_x = grad_x[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        grad_b = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, w, bias) if bias is not None else (x, w)
    return record(out, parents, _backward, "conv2d")


def conv_transpose2d(
    x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None, stride: int = 2, padding: int = 0
) -> Tensor:
    """Transposed 2-D convolution, the adjoint of ``conv2d`` with the same kernel.

    Parameters
    ----------
    x : Tensor
        Input [N, Cin, H, W].
    w : Tensor
        Kernel [Cin, Cout, kh, kw], laid out like the conv2d kernel it transposes.
    b : Optional[Tensor]
        Bias [Cout].
    stride : int
        Upsampling step.
    padding : int
        Border cropped from the full output.
    Returns
    ----------
    : Tensor
        Output [N, Cout, (H-1)*stride-2p+kh, (W-1)*stride-2p+kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(b) if b is not None else None
    _expect_rank(x, 4, "conv_transpose2d input")
    _expect_rank(w, 4, "conv_transpose2d kernel")
    if stride < 1 or padding < 0:
        raise ShapeError(
            f"conv_transpose2d needs stride >= 1 and padding >= 0, got stride {stride}, padding {padding}."
        )
    _, channels, height, width = x.shape
    in_channels, out_channels, kh, kw = w.shape
    if in_channels != channels:
        raise ShapeError(f"conv_transpose2d kernel expects {in_channels} input channels, input has dims {x.dims}.")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv_transpose2d bias must have dims [{out_channels}], got {bias.dims}.")
    full_h, full_w = (height - 1) * stride + kh, (width - 1) * stride + kw
    if full_h - 2 * padding < 1 or full_w - 2 * padding < 1:
        raise ShapeError(f"conv_transpose2d padding {padding} crops the whole {full_h}x{full_w} output.")

    cols = np.tensordot(x.data, w.data, axes=([1], [0]))
    out = _scatter(cols, full_h, full_w, stride)[:, :, padding : full_h - padding, padding : full_w - padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        windows = _windows(_pad(grad, padding), kh, kw, stride)
        grad_x = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, w, bias) if bias is not None else (x, w)
    return record(out, parents, _backward, "conv_transpose2d")


def pool2d(x: ArrayLike, kind: Union[PoolKind, str] = PoolKind.avg, size: int = 2) -> Tensor:
    """Non-overlapping average or max pooling with a size x size window.

    Max pooling routes the gradient to the first maximum of each window in row-major order.

    :raises ShapeError: if H or W is not divisible by size.
    """
    x = as_tensor(x)
    kind = PoolKind(kind)
    _expect_rank(x, 4, "pool2d input")
    n, channels, height, width = x.shape
    if size < 1 or height % size or width % size:
        raise ShapeError(f"pool2d size {size} does not divide the spatial dims {height}x{width}.")
    out_h, out_w = height // size, width // size
    blocks = x.data.reshape(n, channels, out_h, size, out_w, size)

    if kind is PoolKind.avg:
        out = blocks.mean(axis=(3, 5))

        def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            spread = np.repeat(np.repeat(grad, size, axis=2), size, axis=3)
            return (spread / (size * size),)

        return record(out, (x,), _backward, "avg_pool2d")

    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, channels, out_h, out_w, size * size)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def _backward_max(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        routed = np.zeros_like(flat)
        np.put_along_axis(routed, argmax[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, channels, out_h, out_w, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, channels, height, width),)

    return record(out, (x,), _backward_max, "max_pool2d")


def adaptive_avg_pool(x: ArrayLike) -> Tensor:
    """Per-channel spatial mean [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    _expect_rank(x, 4, "adaptive_avg_pool input")
    _, _, height, width = x.shape

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.broadcast_to(grad[:, :, None, None] / (height * width), x.shape),)

    return record(x.data.mean(axis=(2, 3)), (x,), _backward, "adaptive_avg_pool")


def upsample(x: ArrayLike, factor: int = 2, mode: str = "nearest") -> Tensor:
    """Nearest-neighbour upsampling replicating every pixel factor x factor times."""
    x = as_tensor(x)
    _expect_rank(x, 4, "upsample input")
    if mode != "nearest":
        raise ValueError(f"Unsupported upsample mode {mode}, possible values are: nearest")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}.")
    n, channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad.reshape(n, channels, height, factor, width, factor).sum(axis=(3, 5)),)

    return record(out, (x,), _backward, "upsample")


def linear(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Affine map x @ w.T + b with x [N, Din], w [Dout, Din], b [Dout]."""
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(b) if b is not None else None
    _expect_rank(x, 2, "linear input")
    _expect_rank(w, 2, "linear weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear weight expects {w.shape[1]} input features, input has dims {x.dims}.")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"linear bias must have dims [{w.shape[0]}], got {bias.dims}.")
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_b = grad.sum(axis=0) if bias is not None else None
        return grad @ w.data, grad.T @ x.data, grad_b

    parents = (x, w, bias) if bias is not None else (x, w)
    return record(out, parents, _backward, "linear")


def batchnorm2d(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    running_stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over N, H, W per channel.

    Training mode normalizes with the batch statistics and updates running_stats in place
    (unbiased variance); eval mode normalizes with running_stats.

    :raises DegenerateBatchError: for a single-sample batch in training mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _expect_rank(x, 4, "batchnorm2d input")
    n, channels, height, width = x.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm2d affine parameters must have dims [{channels}].")
    scale = gamma.data[None, :, None, None]

    if not training:
        inv_std = 1.0 / np.sqrt(running_stats.var + eps)
        normalized = (x.data - running_stats.mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = scale * normalized + beta.data[None, :, None, None]

        def _backward_eval(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            return (
                grad * scale * inv_std[None, :, None, None],
                (grad * normalized).sum(axis=(0, 2, 3)),
                grad.sum(axis=(0, 2, 3)),
            )

        return record(out, (x, gamma, beta), _backward_eval, "batchnorm2d")

    if n < 2:
        raise DegenerateBatchError(f"batchnorm2d needs at least 2 samples in training mode, got dims {x.dims}.")
    count = n * height * width
    batch_mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - batch_mean[None, :, None, None]
    batch_var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(batch_var + eps))[None, :, None, None]
    normalized = centered * inv_std
    out = scale * normalized + beta.data[None, :, None, None]

    momentum = running_stats.momentum
    running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * batch_mean
    running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * batch_var * count / (count - 1)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_normalized = grad * scale
        grad_x = (
            inv_std
            / count
            * (
                count * grad_normalized
                - grad_normalized.sum(axis=(0, 2, 3), keepdims=True)
                - normalized * (grad_normalized * normalized).sum(axis=(0, 2, 3), keepdims=True)
            )
        )
        return grad_x, (grad * normalized).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

    return record(out, (x, gamma, beta), _backward, "batchnorm2d")


def relu(x: ArrayLike) -> Tensor:
    """Elementwise max(x, 0)."""
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.maximum(x.data, 0), (x,), lambda grad: (grad * mask,), "relu")


def sigmoid(x: ArrayLike) -> Tensor:
    """Elementwise logistic function."""
    x = as_tensor(x)
    out = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype, copy=False)
    return record(out, (x,), lambda grad: (grad * out * (1 - out),), "sigmoid")


def tanh(x: ArrayLike) -> Tensor:
    """Elementwise hyperbolic tangent."""
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record(out, (x,), lambda grad: (grad * (1 - out * out),), "tanh")


_ACTIVATIONS = {
    ActivationKind.relu: relu,
    ActivationKind.sigmoid: sigmoid,
    ActivationKind.tanh: tanh,
}


def activation(x: ArrayLike, kind: Union[ActivationKind, str]) -> Tensor:
    """Applies the activation named by kind.

    :raises ValueError: if kind is not an ActivationKind value.
    """
    try:
        resolved = ActivationKind(kind)
    except ValueError:
        raise ValueError(
            f"Unsupported activation {kind}, possible values are: "
            f"{', '.join(member.value for member in ActivationKind)}"
        ) from ValueError
    return _ACTIVATIONS[resolved](x)


def softmax(x: ArrayLike) -> Tensor:
    """Row-wise softmax of [N, K] logits, stabilized by subtracting the row maximum."""
    x = as_tensor(x)
    _expect_rank(x, 2, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=1, keepdims=True)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return record(out, (x,), _backward, "softmax")


def concat(xs: Sequence[ArrayLike], axis: int = 1) -> Tensor:
    """Concatenates tensors along axis; all other dims must agree."""
    tensors: List[Tensor] = [as_tensor(x) for x in xs]
    if not tensors:
        raise ShapeError("concat needs at least one tensor.")
    rank = tensors[0].ndim
    axis = axis % rank
    for tensor in tensors[1:]:
        if tensor.ndim != rank or any(
            tensor.shape[dim] != tensors[0].shape[dim] for dim in range(rank) if dim != axis
        ):
            raise ShapeError(
                f"concat along axis {axis} needs equal non-axis dims, got {[t.dims for t in tensors]}."
            )
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    out = np.concatenate([tensor.data for tensor in tensors], axis=axis)

    def _backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return np.split(grad, splits, axis=axis)

    return record(out, tuple(tensors), _backward, "concat")


def flatten(x: ArrayLike) -> Tensor:
    """Flattens all but the first dimension."""
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def dropout(x: ArrayLike, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity in eval mode or for p == 0."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    return record(x.data * mask, (x,), lambda grad: (grad * mask,), "dropout")
