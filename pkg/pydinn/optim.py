"""Module implementing the Adam optimizer."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from pydinn.errors import OptimError
from pydinn.tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Adam optimizer state.

    Moment arrays are keyed by parameter name and created lazily on the first update.
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Parameter],
    state: AdamState,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> AdamState:
    """Applies one bias-corrected Adam update to params in place.

    Parameters
    ----------
    params : Mapping[str, Parameter]
        Parameters keyed by name.
    state : AdamState
        Optimizer state, updated in place.
    grads : Optional[Mapping[str, np.ndarray]]
        Gradients keyed by name; taken from ``Parameter.grad`` when omitted.
    Returns
    ----------
    : AdamState
        The updated state.
    :raises OptimError: if any parameter has no gradient. No parameter is touched in that case.
    """
    resolved = {
        name: grads[name] if grads is not None and name in grads else param.grad for name, param in params.items()
    }
    missing = sorted(name for name, grad in resolved.items() if grad is None)
    if missing:
        raise OptimError(f"No gradient for parameters: {', '.join(missing)}")
    for name, param in params.items():
        if np.shape(resolved[name]) != param.shape:
            raise OptimError(
                f"Gradient of {name} has dims {list(np.shape(resolved[name]))}, parameter has {param.dims}."
            )

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = np.asarray(resolved[name], dtype=param.data.dtype)
        first = state.m.setdefault(name, np.zeros_like(param.data))
        second = state.v.setdefault(name, np.zeros_like(param.data))
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad
        update = state.lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        param.data -= update.astype(param.data.dtype, copy=False)
    return state


class Adam:
    """Adam class.

    Binds a fixed set of named parameters to an AdamState.
    """

    def __init__(
        self,
        params: Mapping[str, Parameter],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(sorted(params.items()))
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        logger.debug("Adam over %d parameters, lr=%g", len(self.params), lr)

    def zero_grad(self) -> None:
        """Drops the gradients of the bound parameters."""
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        """Applies one update from the accumulated gradients."""
        adam_step(self.params, self.state)
