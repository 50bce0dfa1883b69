"""Worker-pool helpers: WAVEKIT_THREADS caps the pool, results keep order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    env = os.environ.get("WAVEKIT_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"WAVEKIT_THREADS must be an integer, got {env!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


def map_ordered(fn, items, threads: int | None = None) -> list:
    """Apply ``fn`` over ``items`` on a thread pool; results in input order."""
    items = list(items)
    n = worker_count() if threads is None else max(1, threads)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
