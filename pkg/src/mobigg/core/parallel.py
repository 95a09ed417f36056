"""Schedule-independent trial execution."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")

THREADS_ENV = "MOBIGG_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def map_trials(fn: Callable[[int], T], trials: Iterable[int] | int, threads: int | None = None) -> list[T]:
    """Run ``fn(trial)`` for each trial index; results come back in trial order.

    Every trial draws from its own substream, so the output does not depend on
    ``threads``.
    """
    idx = range(trials) if isinstance(trials, int) else list(trials)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(idx) <= 1:
        return [fn(i) for i in idx]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, idx))
