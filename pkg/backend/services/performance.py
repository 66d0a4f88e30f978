"""
Performance utilities for the render loop
Timing, deterministic RNG streams and chunked data-parallel execution
"""

import functools
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import numpy as np

from services.error_handler import get_logger

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def timing_decorator(func: Callable) -> Callable:
    """Logs how long the wrapped function took"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
            logger.info(f"{func.__name__} took {time.perf_counter() - start:.3f}s")
            return result
        except Exception as e:
            logger.warning(
                f"{func.__name__} failed after {time.perf_counter() - start:.3f}s: {e}"
            )
            raise

    return wrapper


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """
    Independent generator for (seed, *keys).

    The same keys always give the same stream, different keys give statistically
    independent streams, so every pass/chunk/worker owns its own stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def split_chunks(n: int, chunk_size: int) -> List[slice]:
    """Slices covering range(n) in chunks of at most chunk_size"""
    if n <= 0:
        return []
    return [slice(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]


def run_chunked(fn: Callable[[T], R], chunks: Sequence[T], workers: int = 1) -> List[R]:
    """
    Runs fn over chunks, in parallel when workers > 1.

    Results come back in chunk order, so the merged output does not depend on the
    number of workers.
    """
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
