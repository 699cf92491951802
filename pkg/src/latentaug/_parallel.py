"""Thread-count policy shared by the clustering and evaluation loops.

Parallel sections split work into fixed-size chunks and combine partial
results in chunk order, so outputs are bit-identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

#: Environment variable capping worker threads (default: 1, single-threaded).
THREADS_ENV = "LATENTAUG_THREADS"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def map_chunks(fn, items: list, threads: int | None = None) -> list:
    """Apply fn to each item; results in item order regardless of scheduling."""
    if threads is None:
        threads = thread_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
