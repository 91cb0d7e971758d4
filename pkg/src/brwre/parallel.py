"""Replicate-parallel execution.

Replicates are cut into fixed-size chunks whose boundaries do not depend on
the worker count, each chunk is computed independently from
``(master_seed, replicate index)``, and the results are concatenated in
replicate order.  Any number of workers therefore yields identical arrays.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable

import numpy as np

WORKERS_ENV = "BRWRE_WORKERS"
CHUNK = 2048


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def chunks(n: int, size: int = CHUNK) -> list[tuple[int, int]]:
    return [(start, min(size, n - start)) for start in range(0, n, size)]


def run_chunked(task: Callable, n: int, workers: int | None = None, start: int = 0):
    """Call ``task(first, count)`` over all chunks and concatenate each returned array.

    ``task`` must be picklable when ``workers > 1``; it returns a tuple of
    arrays whose first axis indexes replicates.
    """
    pieces = [(start + a, c) for a, c in chunks(n)]
    w = worker_count(workers)
    if w == 1 or len(pieces) == 1:
        results = [task(a, c) for a, c in pieces]
    else:
        with ProcessPoolExecutor(max_workers=w) as pool:
            results = list(pool.map(task, *zip(*pieces)))
    if not results:
        return None
    return tuple(np.concatenate([r[i] for r in results]) for i in range(len(results[0])))
