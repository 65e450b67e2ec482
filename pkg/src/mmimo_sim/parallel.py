"""Order-preserving process pool shared by the Monte Carlo chunks and the experiment jobs."""

import multiprocessing
from collections.abc import Callable, Sequence
from typing import TypeVar

from mmimo_sim.logging import configure_worker, run_log

T = TypeVar("T")
R = TypeVar("R")


def available_workers() -> int:
    return multiprocessing.cpu_count()


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """`[fn(x) for x in items]`, spread over `workers` processes when that helps.

    Results come back in input order. `fn` must be a module-level function and `items`
    picklable. Workers log to the parent's run log.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(workers, len(items), available_workers())
    with multiprocessing.Pool(processes=workers, initializer=configure_worker, initargs=(run_log(),)) as pool:
        return pool.map(fn, items, chunksize=1)
