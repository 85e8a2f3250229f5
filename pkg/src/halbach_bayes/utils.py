"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError

THREADS_ENV = "HALBACH_THREADS"


def thread_count() -> int:
    """Worker count for parallel loops, capped by the HALBACH_THREADS variable."""
    available = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return available
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return min(cap, available)


def parallel_map(fn, items):
    """Map preserving input order; threaded when more than one worker is allowed."""
    items = list(items)
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
