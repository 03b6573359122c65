"""Worker-count control and a deterministic chunked thread map.

Results are written by index, so the output never depends on scheduling.
The DOSKIT_THREADS environment variable caps the worker count; 1 forces
serial execution.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    env = os.environ.get("DOSKIT_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def indexed_map(fn, n: int, workers: int | None = None) -> list:
    """Evaluate ``fn(i)`` for i in range(n), preserving index order."""
    workers = worker_count() if workers is None else workers
    out = [None] * n
    if workers <= 1 or n <= 1:
        for i in range(n):
            out[i] = fn(i)
        return out

    def run_chunk(lo: int, hi: int):
        for i in range(lo, hi):
            out[i] = fn(i)

    chunk = max(1, (n + workers - 1) // workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_chunk, lo, min(lo + chunk, n))
                   for lo in range(0, n, chunk)]
        for fut in futures:
            fut.result()
    return out
