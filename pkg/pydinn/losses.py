"""Module implementing the training objectives and evaluation metrics.

Differentiable losses take and return Tensors; metrics take arrays (or Tensors) and
return Python floats.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Union

import numpy as np

from pydinn import functional as F
from pydinn.errors import ConfigError, DegenerateError, NumericsError, ShapeError
from pydinn.tensor import ArrayLike, Tensor, as_tensor, no_grad, sqrt

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8

Numeric = Union[Tensor, np.ndarray, float]


class SsimWindow(Enum):
    """SsimWindow enum."""

    image = "image"  # One set of statistics per image channel.
    sliding = "sliding"  # Uniform square window, mean of the local map.


@dataclass(frozen=True)
class SsimParams:
    """SSIM configuration; C1 and C2 derive from data_range."""

    data_range: float = 2.0
    window: SsimWindow = SsimWindow.image
    window_size: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "window", SsimWindow(self.window))
        if self.data_range <= 0:
            raise ConfigError(f"ssim.data_range must be > 0, got {self.data_range}.")
        if self.window_size < 2:
            raise ConfigError(f"ssim.window_size must be >= 2, got {self.window_size}.")

    @property
    def c1(self) -> float:
        """(0.01 * data_range)^2."""
        return (0.01 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        """(0.03 * data_range)^2."""
        return (0.03 * self.data_range) ** 2


@dataclass(frozen=True)
class LossWeights:
    """Weights of the integrated objective.

    alpha, beta, gamma_t and delta weight the image, demographic, travel and semantic terms;
    lam is the MSE share inside the image term.
    """

    alpha: float = 0.7
    beta: float = 0.3
    gamma_t: float = 0.3
    delta: float = 0.1
    lam: float = 0.7

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma_t", "delta", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0, got {getattr(self, name)}.")
        if self.lam > 1:
            raise ConfigError(f"loss.lam must lie in [0, 1], got {self.lam}.")


def _same_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} needs equal dims, got {a.dims} and {b.dims}.")


def _batched(x: Tensor) -> Tensor:
    """[C, H, W] -> [1, C, H, W]; rank-4 tensors pass through."""
    if x.ndim == 3:
        return x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ShapeError(f"Images must be [C, H, W] or [N, C, H, W], got dims {x.dims}.")
    return x


def _global_ssim(x: Tensor, y: Tensor, params: SsimParams) -> Tensor:
    mu_x = x.mean(axis=(2, 3), keepdims=True)
    mu_y = y.mean(axis=(2, 3), keepdims=True)
    dx, dy = x - mu_x, y - mu_y
    var_x = (dx * dx).mean(axis=(2, 3), keepdims=True)
    var_y = (dy * dy).mean(axis=(2, 3), keepdims=True)
    cov = (dx * dy).mean(axis=(2, 3), keepdims=True)
    numerator = (2.0 * mu_x * mu_y + params.c1) * (2.0 * cov + params.c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + params.c1) * (var_x + var_y + params.c2)
    return (numerator / denominator).mean()


def _sliding_ssim(x: Tensor, y: Tensor, params: SsimParams) -> Tensor:
    n, channels, height, width = x.shape
    size = params.window_size
    if height < size or width < size:
        raise ShapeError(f"Images of {height}x{width} are smaller than the {size}x{size} SSIM window.")
    kernel = np.full((1, 1, size, size), 1.0 / (size * size), dtype=x.dtype)
    planes_x = x.reshape(n * channels, 1, height, width)
    planes_y = y.reshape(n * channels, 1, height, width)

    def _local_mean(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel)

    mu_x, mu_y = _local_mean(planes_x), _local_mean(planes_y)
    var_x = _local_mean(planes_x * planes_x) - mu_x * mu_x
    var_y = _local_mean(planes_y * planes_y) - mu_y * mu_y
    cov = _local_mean(planes_x * planes_y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + params.c1) * (2.0 * cov + params.c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + params.c1) * (var_x + var_y + params.c2)
    return (numerator / denominator).mean()


def ssim(x: ArrayLike, y: ArrayLike, params: Optional[SsimParams] = None) -> Tensor:
    """Structural similarity of two image batches, averaged over samples and channels.

    Parameters
    ----------
    x, y : ArrayLike
        [C, H, W] or [N, C, H, W] images.
    params : Optional[SsimParams]
        Data range and window mode, defaults to global statistics over range 2.
    Returns
    ----------
    : Tensor
        Scalar in [-1, 1]; exactly 1 for identical inputs in the global mode.
    :raises ShapeError: if the dims differ.
    """
    params = params or SsimParams()
    x, y = _batched(as_tensor(x)), _batched(as_tensor(y))
    _same_dims(x, y, "ssim")
    if params.window is SsimWindow.sliding:
        return _sliding_ssim(x, y, params)
    return _global_ssim(x, y, params)


def mse(x: ArrayLike, y: ArrayLike) -> Tensor:
    """Mean squared difference over all entries."""
    x, y = as_tensor(x), as_tensor(y)
    _same_dims(x, y, "mse")
    diff = x - y
    return (diff * diff).mean()


def image_loss(x_hat: ArrayLike, x: ArrayLike, lam: float = 0.7, params: Optional[SsimParams] = None) -> Tensor:
    """lam * MSE + (1 - lam) * (1 - SSIM); zero for identical images."""
    x_hat, x = as_tensor(x_hat), as_tensor(x)
    _same_dims(x_hat, x, "image_loss")
    if lam == 1.0:
        return mse(x_hat, x)
    return lam * mse(x_hat, x) + (1.0 - lam) * (1.0 - ssim(x_hat, x, params))


def vector_mse(y_hat: ArrayLike, y: ArrayLike) -> Tensor:
    """Mean squared difference of demographic or travel vectors."""
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    _same_dims(y_hat, y, "vector_mse")
    return mse(y_hat, y)


def normalize(x: ArrayLike) -> Tensor:
    """(x - mean) / (std + eps) along the last axis, population statistics."""
    x = as_tensor(x)
    centered = x - x.mean(axis=-1, keepdims=True)
    std = sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return centered / (std + NORMALIZE_EPS)


def semantic_loss(s: ArrayLike, b_pooled: ArrayLike) -> Tensor:
    """Squared L2 distance of the normalized vectors, averaged over the batch.

    Parameters
    ----------
    s, b_pooled : ArrayLike
        [D] or [N, D] semantic vectors.
    Returns
    ----------
    : Tensor
        Scalar, invariant under positive affine maps of either argument.
    """
    s, b_pooled = as_tensor(s), as_tensor(b_pooled)
    _same_dims(s, b_pooled, "semantic_loss")
    if s.ndim == 1:
        s, b_pooled = s.reshape(1, -1), b_pooled.reshape(1, -1)
    diff = normalize(s) - normalize(b_pooled)
    return (diff * diff).sum(axis=-1).mean()


@dataclass
class LossParts:
    """Unweighted loss terms; absent terms are 0."""

    image: Numeric = 0.0
    demo: Numeric = 0.0
    travel: Numeric = 0.0
    semantic: Numeric = 0.0

    def values(self) -> Dict[str, float]:
        """Float value of every term."""
        return {name: _as_float(getattr(self, name)) for name in ("image", "demo", "travel", "semantic")}


def _as_float(value: Numeric) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(np.asarray(value))


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """alpha * image + beta * demo + gamma_t * travel + delta * semantic.

    :raises NumericsError: if any part is NaN or infinite.
    """
    bad = sorted(name for name, value in parts.values().items() if not math.isfinite(value))
    if bad:
        raise NumericsError(f"Loss parts are not finite: {', '.join(bad)}")
    total = as_tensor(0.0)
    for weight, part in (
        (weights.alpha, parts.image),
        (weights.beta, parts.demo),
        (weights.gamma_t, parts.travel),
        (weights.delta, parts.semantic),
    ):
        if weight != 0.0:
            total = total + weight * as_tensor(part)
    return total


# metrics


def _array(value: Numeric) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)


def mse_value(x_hat: Numeric, x: Numeric) -> float:
    """Mean squared error as float."""
    a, b = _array(x_hat), _array(x)
    if a.shape != b.shape:
        raise ShapeError(f"mse needs equal dims, got {list(a.shape)} and {list(b.shape)}.")
    return float(np.mean((a - b) ** 2))


def ssim_value(x_hat: Numeric, x: Numeric, params: Optional[SsimParams] = None) -> float:
    """SSIM as float, computed in 64-bit without tape."""
    with no_grad():
        return ssim(Tensor(_array(x_hat), dtype=np.float64), Tensor(_array(x), dtype=np.float64), params).item()


def psnr(x_hat: Numeric, x: Numeric, data_range: float = 2.0) -> float:
    """10 log10(data_range^2 / MSE) in dB; +inf for identical inputs."""
    error = mse_value(x_hat, x)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / error)


def r_squared(y_hat: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot of one column.

    :raises DegenerateError: if y has zero variance.
    """
    predicted, actual = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ShapeError(f"r_squared needs equal dims, got {list(predicted.shape)} and {list(actual.shape)}.")
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if actual.size < 2 or ss_tot == 0.0:
        raise DegenerateError("r_squared is undefined for a target with zero variance.")
    return 1.0 - float(np.sum((actual - predicted) ** 2)) / ss_tot


def r_squared_table(y_hat: np.ndarray, y: np.ndarray, names: Sequence[str]) -> Dict[str, float]:
    """Per-column R^2; NaN for constant columns."""
    predicted, actual = np.asarray(y_hat), np.asarray(y)
    if predicted.shape != actual.shape or predicted.ndim != 2 or predicted.shape[1] != len(names):
        raise ShapeError(
            f"r_squared_table needs two [S, {len(names)}] matrices, "
            f"got {list(predicted.shape)} and {list(actual.shape)}."
        )
    table = {}
    for column, name in enumerate(names):
        try:
            table[name] = r_squared(predicted[:, column], actual[:, column])
        except DegenerateError:
            table[name] = math.nan
    return table


def overall_r_squared(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Uniform average of the per-column R^2 over columns with nonzero variance.

    :raises DegenerateError: if every column is constant.
    """
    predicted, actual = np.atleast_2d(np.asarray(y_hat)), np.atleast_2d(np.asarray(y))
    table = r_squared_table(predicted, actual, [str(column) for column in range(actual.shape[1])])
    defined = [value for value in table.values() if not math.isnan(value)]
    if not defined:
        raise DegenerateError("overall_r_squared needs at least one target column with nonzero variance.")
    return float(np.mean(defined))


def _first_component(samples: np.ndarray) -> np.ndarray:
    """Scores on the first principal direction; the sign makes the largest loading positive."""
    centered = samples - samples.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    return centered @ direction


def canonical_correlation(u: np.ndarray, v: np.ndarray) -> float:
    """Normalized covariance of paired samples.

    Multi-dimensional samples are first projected onto their first principal direction.

    Parameters
    ----------
    u, v : np.ndarray
        [S] or [S, D] paired samples, S >= 2.
    Returns
    ----------
    : float
        Correlation in [-1, 1].
    :raises DegenerateError: if either projection has zero variance.
    """
    a, b = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"canonical_correlation needs paired samples, got {a.shape[0]} and {b.shape[0]}.")
    if a.shape[0] < 2:
        raise DegenerateError("canonical_correlation needs at least 2 samples.")
    a = _first_component(a) if a.ndim > 1 and a.shape[1] > 1 else a.reshape(-1)
    b = _first_component(b) if b.ndim > 1 and b.shape[1] > 1 else b.reshape(-1)
    a, b = a - a.mean(), b - b.mean()
    scale = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if scale == 0.0:
        raise DegenerateError("canonical_correlation is undefined for samples with zero variance.")
    return float(np.clip(np.sum(a * b) / scale, -1.0, 1.0))


def demo_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """MSE between demographics regressed from generated images and the ground truth."""
    return mse_value(predicted, target)
