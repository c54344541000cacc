"""Module implementing finite-difference gradient checks."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pydinn.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckFailure:
    """One coordinate whose analytic and numeric gradients disagree."""

    tensor: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    """Outcome of a gradient check.

    max_rel_err is taken over all checked coordinates; skipped counts coordinates where the
    perturbation crossed a kink (only with ``skip_kinks``).
    """

    max_rel_err: float = 0.0
    failures: List[GradCheckFailure] = field(default_factory=list)
    checked: int = 0
    skipped: int = 0
    per_tensor: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """True if no coordinate failed."""
        return not self.failures


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-5,
    wrt: Optional[Mapping[str, Tensor]] = None,
    n_samples: int = 25,
    h: float = 1e-4,
    floor: float = 1e-6,
    skip_kinks: bool = False,
    kink_tol: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compares backward gradients of fn with central finite differences.

    A non-scalar output is reduced with a fixed random projection. fn must be pure: dropout
    disabled and no state that changes its output between calls.

    Parameters
    ----------
    fn : Callable[..., Tensor]
        Called as fn(*inputs).
    inputs : Sequence[Tensor]
        Positional inputs; those with requires_grad are checked as "input{i}".
    tol : float
        Relative error above which a coordinate is reported as failure.
    wrt : Optional[Mapping[str, Tensor]]
        Further tensors to check, typically named model parameters.
    n_samples : int
        Coordinates checked per tensor (all of them for smaller tensors).
    h : float
        Finite-difference step.
    floor : float
        Lower bound of the relative error denominator.
    skip_kinks : bool
        Skip coordinates whose one-sided differences disagree by more than kink_tol.
    kink_tol : float
        Relative disagreement of the one-sided differences that marks a kink.
    seed : int
        Seed of the coordinate sampler and projection.
    Returns
    ----------
    : GradCheckReport
        Worst relative error and every failing coordinate.
    """
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {
        f"input{index}": tensor for index, tensor in enumerate(inputs) if tensor.requires_grad
    }
    tensors.update(wrt or {})
    for tensor in tensors.values():
        tensor.grad = None

    out = fn(*inputs)
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    backward(out if projection is None else (out * projection).sum())
    analytic = {
        name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data) for name, tensor in tensors.items()
    }

    def _evaluate() -> float:
        with no_grad():
            value = fn(*inputs).data
        return float(value.sum() if projection is None else np.sum(value * projection))

    center = _evaluate() if skip_kinks else 0.0
    report = GradCheckReport()
    for name, tensor in tensors.items():
        if tensor.size <= n_samples:
            candidates = np.arange(tensor.size)
        else:
            candidates = rng.choice(tensor.size, size=min(tensor.size, 4 * n_samples), replace=False)
        worst = 0.0
        checked = 0
        for flat in candidates:
            if checked >= n_samples:
                break
            index = tuple(int(i) for i in np.unravel_index(int(flat), tensor.shape))
            original = tensor.data[index].copy()
            tensor.data[index] = original + h
            plus = _evaluate()
            tensor.data[index] = original - h
            minus = _evaluate()
            tensor.data[index] = original
            if skip_kinks:
                right, left = (plus - center) / h, (center - minus) / h
                if abs(right - left) > kink_tol * max(abs(right), abs(left), floor):
                    report.skipped += 1
                    logger.debug("skipping kink at %s%s", name, index)
                    continue
            numeric = (plus - minus) / (2 * h)
            value = float(analytic[name][index])
            rel_err = abs(value - numeric) / max(abs(value), abs(numeric), floor)
            worst = max(worst, rel_err)
            checked += 1
            if rel_err > tol:
                report.failures.append(GradCheckFailure(name, index, value, numeric, rel_err))
        report.per_tensor[name] = worst
        report.checked += checked
        report.max_rel_err = max(report.max_rel_err, worst)
    logger.info(
        "gradient check: %d coordinates, max rel err %.3g, %d failures, %d skipped",
        report.checked,
        report.max_rel_err,
        len(report.failures),
        report.skipped,
    )
    return report
