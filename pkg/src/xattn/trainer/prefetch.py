"""In-order batch preparation on a worker pool."""

from __future__ import annotations
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, List, TypeVar

import numpy as np

from ..config import max_threads

T = TypeVar("T")


def step_rngs(seed: int, n_steps: int, stream: int = 0) -> List[np.random.Generator]:
    """One generator per step, spawned from a single SeedSequence."""
    root = np.random.SeedSequence([int(seed), int(stream)])
    return [np.random.default_rng(s) for s in root.spawn(n_steps)]


def prefetch(jobs: Iterable[Callable[[], T]], lookahead: int = 4, max_workers: int = 0) -> Iterator[T]:
    """Run jobs ahead on a thread pool, yielding results in submission order."""
    workers = max_workers or max_threads()
    it = iter(jobs)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque(pool.submit(job) for _, job in zip(range(max(1, lookahead)), it))
        while pending:
            fut = pending.popleft()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(nxt))
            yield fut.result()
