"""Ordered task execution over a process pool.

Results come back in task order and every task carries its own logical
random stream, so outputs do not depend on the number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV = "BETHE_ANDERSON_WORKERS"


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def ordered_map(fn, tasks, workers: int | None = None) -> list:
    """``[fn(t) for t in tasks]``, optionally spread over processes."""
    tasks = list(tasks)
    n = worker_count(workers)
    if n == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n, len(tasks))) as ex:
        return list(ex.map(fn, tasks))
