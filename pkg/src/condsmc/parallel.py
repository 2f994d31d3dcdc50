"""Replicate-level parallelism with order-independent results."""
from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def chunks(total: int, size: int):
    return [(s, min(total, s + size)) for s in range(0, total, size)]


def map_replicates(fn, total: int, chunk: int, threads: int = 1) -> np.ndarray:
    """Evaluate ``fn(start, stop)`` over consecutive replicate ranges.

    ``fn`` returns an array whose first axis has length ``stop - start``.
    Chunk boundaries do not depend on ``threads`` and every replicate owns its
    random stream, so the concatenated result is identical for any worker
    count.  ``fn`` must be picklable when ``threads > 1``.
    """
    ranges = chunks(total, max(1, chunk))
    if threads <= 1 or len(ranges) == 1:
        parts = [fn(a, b) for a, b in ranges]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            parts = list(pool.map(fn, *zip(*ranges)))
    return np.concatenate(parts, axis=0)


def batch_size(horizon: int, N: int, budget: int = 2_000_000) -> int:
    """Replicates per batch so one batch holds about ``budget`` uniforms."""
    return max(1, budget // ((2 * horizon + 2) * max(N, 1)))
