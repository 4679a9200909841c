# app/services/parallel.py
from typing import Callable, Iterable, TypeVar

from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")


def _single_threaded(func: Callable[[T], R], item: T) -> R:
    # BLAS pinned to one thread per task
    with threadpool_limits(limits=1):
        return func(item)


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """
    Apply ``func`` to every item, in a joblib process pool when workers > 1.

    Results come back in input order whatever order the workers finish in.
    ``func`` must be picklable (a module-level function or a partial of one).
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [_single_threaded(func, item) for item in items]
    return Parallel(n_jobs=workers)(delayed(_single_threaded)(func, item) for item in items)
