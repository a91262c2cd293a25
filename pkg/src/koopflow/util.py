"""Small shared helpers: float formatting, worker count, relative norms."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

# 17 significant digits round-trips any 64-bit float exactly.
FLOAT_FMT = "%.17g"


def fmt_float(x: float) -> str:
    return FLOAT_FMT % float(x)


def rel_fro(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius distance of a from b, relative to ||b||_F (absolute if b ~ 0)."""
    denom = np.linalg.norm(b)
    diff = float(np.linalg.norm(a - b))
    return diff / denom if denom > 0 else diff


def thread_count() -> int:
    """Worker cap from KOOPFLOW_THREADS (default 1 = serial)."""
    raw = os.environ.get("KOOPFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def ordered_map(fn, items):
    """Map fn over items, in parallel when KOOPFLOW_THREADS > 1, preserving order.

    Work items must be independent; results are collected in input order so
    parallel and serial execution produce identical output.
    """
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
