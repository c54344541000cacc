"""Module implementing the bounded worker pool used for per-county work."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from pydinn.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "DINN_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Worker count from the DINN_THREADS environment variable, 1 when unset.

    :raises ConfigError: if the variable is not a positive integer.
    """
    value = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}.") from ValueError
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}.")
    return count


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Applies fn to every item, concurrently when DINN_THREADS > 1; results keep the input order."""
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    logger.debug("mapping %d items over %d threads", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
