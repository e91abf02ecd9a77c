"""Ordered process-pool mapping shared by sweeps and the Monte Carlo oracle."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional

import psutil

WORKERS_ENV = "SPECDIFF_WORKERS"


def default_workers() -> int:
    """Physical core count, overridden by ``SPECDIFF_WORKERS`` when set."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from None
        if value < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}")
        return value
    return psutil.cpu_count(logical=False) or os.cpu_count() or 1


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        return default_workers()
    if int(workers) != workers or workers < 1:
        raise ValueError(f"workers must be a positive integer, got {workers!r}")
    return int(workers)


def ordered_map(fn: Callable, items: Iterable, workers: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, evaluated on up to ``workers`` processes.

    Results come back in input order whatever the schedule.  With a single
    worker (or a single item) everything runs in the calling process.
    """
    items = list(items)
    n = min(resolve_workers(workers), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
