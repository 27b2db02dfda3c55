import logging
from collections.abc import Callable, Iterable
from multiprocessing.pool import ThreadPool
from typing import Any

from subdomain_trisolve.config import default_workers

logger = logging.getLogger(__name__)


class WorkerPool:
    """Runs independent subdomain tasks on a pool of worker threads.

    Tasks share read-only inputs and write disjoint slices of their outputs,
    so threads are used instead of processes. With a single worker the tasks
    run inline, in submission order.
    """

    def __init__(self, workers: int | None = None):
        self.workers = workers if workers is not None else default_workers()
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        self._pool: ThreadPool | None = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def starmap(self, fn: Callable[..., Any], args: Iterable[tuple]) -> list[Any]:
        args = list(args)
        if self.workers == 1 or len(args) <= 1:
            return [fn(*a) for a in args]
        if self._pool is None:
            logger.debug(f"Starting thread pool with {self.workers} workers.")
            self._pool = ThreadPool(processes=self.workers)
        return self._pool.starmap(fn, args)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None


def run_tasks(
    fn: Callable[..., Any], args: Iterable[tuple], pool: WorkerPool | None = None
) -> list[Any]:
    """Maps `fn` over argument tuples, on `pool` if given, otherwise inline."""
    if pool is None:
        return [fn(*a) for a in args]
    return pool.starmap(fn, args)
