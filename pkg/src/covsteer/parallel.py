"""Deterministic worker-pool helpers.

COVSTEER_THREADS caps the worker count.  Results are always gathered in task
order, so output is identical for any worker count, including 1.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")


def worker_count() -> int:
    env = os.environ.get("COVSTEER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, min(os.cpu_count() or 1, 8))


def parallel_map(fn: Callable[..., T], items: Sequence) -> list[T]:
    """Apply fn to each item, preserving order; serial when one worker."""
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_tasks(tasks: Sequence[Callable[[], T]]) -> list[T]:
    """Run zero-argument tasks, preserving order of results."""
    return parallel_map(lambda task: task(), tasks)
