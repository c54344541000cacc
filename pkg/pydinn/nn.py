"""Module implementing trainable layers on top of the functional primitives.

A Module discovers its parameters, running statistics and sub-modules from its instance
attributes; the dotted attribute path of each parameter is its name.
"""

import contextlib
import logging
from typing import Any, Dict, Generator, Iterator, List, Optional, Tuple

import numpy as np

from pydinn import functional as F
from pydinn.errors import CheckpointError
from pydinn.functional import RunningStats
from pydinn.tensor import ArrayLike, Parameter, Tensor, get_dtype

logger = logging.getLogger(__name__)


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-uniform initial weights, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


class Module:
    """Module class.

    prefix : str
        Leading name component of every parameter of a top-level model, e.g. "sat".
    training : bool
        Training mode flag, read by batch normalization and dropout.
    """

    prefix = ""

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Computes the module output."""
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _members(self) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    yield f"{name}.{index}", item
            else:
                yield name, value

    def _walk(self, path: str) -> Iterator[Tuple[str, Any]]:
        for name, value in self._members():
            member_path = f"{path}.{name}" if path else name
            if isinstance(value, Module):
                yield from value._walk(member_path)
            elif isinstance(value, (Parameter, RunningStats)):
                yield member_path, value

    def modules(self) -> List["Module"]:
        """This module and all nested sub-modules."""
        found: List[Module] = [self]
        for _, value in self._members():
            if isinstance(value, Module):
                found.extend(value.modules())
        return found

    def named_parameters(self) -> Dict[str, Parameter]:
        """Parameters keyed by dotted name, in name order."""
        found = {path: value for path, value in self._walk(self.prefix) if isinstance(value, Parameter)}
        return dict(sorted(found.items()))

    def parameters(self) -> List[Parameter]:
        """Parameters in name order."""
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> Dict[str, Parameter]:
        """Parameters that currently take part in gradient computation."""
        return {name: param for name, param in self.named_parameters().items() if param.requires_grad}

    def named_buffers(self) -> Dict[str, RunningStats]:
        """Running statistics keyed by dotted name, in name order."""
        found = {path: value for path, value in self._walk(self.prefix) if isinstance(value, RunningStats)}
        return dict(sorted(found.items()))

    def name_parameters(self) -> None:
        """Stores every parameter's dotted path in ``Parameter.name``."""
        for name, param in self.named_parameters().items():
            param.name = name

    def train(self, mode: bool = True) -> "Module":
        """Switches this module and all sub-modules to training (or eval) mode."""
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        """Switches to eval mode."""
        return self.train(False)

    def zero_grad(self) -> None:
        """Drops the gradients of all parameters."""
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of all parameter values and running statistics, keyed by name."""
        state = {name: param.data.copy() for name, param in self.named_parameters().items()}
        for name, stats in self.named_buffers().items():
            state[f"{name}.mean"] = stats.mean.copy()
            state[f"{name}.var"] = stats.var.copy()
        return dict(sorted(state.items()))

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Overwrites parameters and running statistics with the values in state.

        :raises CheckpointError: listing every missing, unexpected or mis-shaped entry.
        """
        targets: Dict[str, np.ndarray] = {name: param.data for name, param in self.named_parameters().items()}
        for name, stats in self.named_buffers().items():
            targets[f"{name}.mean"] = stats.mean
            targets[f"{name}.var"] = stats.var
        problems = [f"missing {name} {list(target.shape)}" for name, target in targets.items() if name not in state]
        problems += [f"unexpected {name} {list(value.shape)}" for name, value in state.items() if name not in targets]
        problems += [
            f"{name}: checkpoint {list(state[name].shape)} vs model {list(target.shape)}"
            for name, target in targets.items()
            if name in state and state[name].shape != target.shape
        ]
        if problems:
            raise CheckpointError("Checkpoint does not match the model:\n  " + "\n  ".join(sorted(problems)))
        for name, target in targets.items():
            target[...] = state[name]
        logger.debug("loaded %d tensors into %s", len(targets), type(self).__name__)


class Conv2d(Module):
    """2-D convolution layer with "same" padding for odd kernels by default."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.w = Parameter(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.b = Parameter(np.zeros(out_channels))

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution layer, 2x upsampling with the default kernel 2 / stride 2."""

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 2, stride: int = 2
    ) -> None:
        super().__init__()
        self.stride = stride
        # Each output pixel sees in_channels * (kernel_size / stride)^2 inputs.
        fan_in = max(1, in_channels * (kernel_size * kernel_size) // (stride * stride))
        self.w = Parameter(he_uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in))
        self.b = Parameter(np.zeros(out_channels))

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.conv_transpose2d(x, self.w, self.b, stride=self.stride)


class BatchNorm2d(Module):
    """Batch normalization layer with learned scale and shift."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running = RunningStats.create(channels, get_dtype())
        self.running.momentum = momentum

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.batchnorm2d(x, self.gamma, self.beta, self.running, training=self.training, eps=self.eps)


class Linear(Module):
    """Fully connected layer."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.w = Parameter(he_uniform(rng, (out_features, in_features), in_features))
        self.b = Parameter(np.zeros(out_features))

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.linear(x, self.w, self.b)


class Dropout(Module):
    """Dropout layer drawing its masks from a generator seeded at construction."""

    def __init__(self, p: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.p = p
        self._rng = np.random.default_rng(int(rng.integers(0, 2**32)))

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.dropout(x, self.p, self.training, self._rng)


class ConvBnRelu(Module):
    """3x3 convolution followed by batch normalization and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: ArrayLike) -> Tensor:  # type: ignore[override]
        return F.relu(self.bn(self.conv(x)))


@contextlib.contextmanager
def evaluating(model: Any) -> Generator:
    """Temporarily switches a Module to eval mode, restoring each sub-module's mode on exit.

    Anything that is not a Module (e.g. a frozen handle) is left untouched.
    """
    if not isinstance(model, Module):
        yield
        return
    modes = [(module, module.training) for module in model.modules()]
    model.eval()
    try:
        yield
    finally:
        for module, mode in modes:
            module.training = mode


class FrozenModel:
    """FrozenModel class.

    Read-only handle on a trained model. Its parameters stop requiring gradients and the
    model stays in eval mode, while forward passes remain differentiable with respect to
    their inputs. The handle is not a Module, so the parameters never appear in the
    parameter set of a model holding it. There is no way back to a trainable model.
    """

    def __init__(self, model: Module) -> None:
        for param in model.parameters():
            param.requires_grad = False
            param.grad = None
        model.eval()
        self._model = model
        logger.debug("froze %s (%d parameters)", type(model).__name__, len(model.parameters()))

    @property
    def config(self) -> Any:
        """Configuration of the wrapped model."""
        return getattr(self._model, "config", None)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of the frozen values, keyed by name."""
        return self._model.state_dict()

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self._model(*args, **kwargs)
