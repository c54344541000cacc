"""Module holding the exceptions raised by pydinn.

Errors describing a bad argument also derive from ValueError, errors describing a bad
program state also derive from RuntimeError.
"""


class DinnError(Exception):
    """Base class of all pydinn errors."""


class ShapeError(DinnError, ValueError):
    """Tensor dimensions do not fit the operation."""


class NumericsError(DinnError, ArithmeticError):
    """A NaN or Inf value was produced or supplied."""


class TapeError(DinnError, RuntimeError):
    """The gradient tape cannot be replayed."""


class OptimError(DinnError, RuntimeError):
    """The optimizer was asked to update a parameter without a gradient."""


class DegenerateBatchError(DinnError, ValueError):
    """Batch statistics cannot be computed from a single sample."""


class EmptyStackError(DinnError, ValueError):
    """A raw image stack holds no acquisition."""


class InsufficientDataError(DinnError, ValueError):
    """Too few values for a statistic."""


class ConfigError(DinnError, ValueError):
    """A configuration value violates its contract."""


class SequenceError(DinnError, ValueError):
    """An image sequence has the wrong number of frames."""


class DataError(DinnError, ValueError):
    """A dataset lacks the records an operation requires."""


class DomainError(DinnError, ValueError):
    """An argument lies outside the domain of a function."""


class DegenerateError(DinnError, ValueError):
    """A statistic is undefined because a sample has zero variance."""


class CheckpointError(DinnError, ValueError):
    """A checkpoint does not match the model it is loaded into."""


class StageError(DinnError, RuntimeError):
    """A training or evaluation stage is missing a prerequisite."""
