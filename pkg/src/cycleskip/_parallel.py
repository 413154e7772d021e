import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "CYCLESKIP_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunked(items: Sequence[T], n_chunks: int) -> List[Sequence[T]]:
    n_chunks = max(1, min(n_chunks, len(items)))
    size, rem = divmod(len(items), n_chunks)
    out, start = [], 0
    for k in range(n_chunks):
        stop = start + size + (1 if k < rem else 0)
        out.append(items[start:stop])
        start = stop
    return out


def map_chunks(func: Callable[[Sequence[T]], List[R]], items: Sequence[T], threads: int | None = None) -> List[R]:
    """Apply ``func`` to contiguous chunks and concatenate results in order.

    ``func`` must compute each item independently of the other items in its
    chunk; results are then identical for any thread count.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return list(func(items))
    chunks = chunked(items, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(func, chunks))
    return [r for part in parts for r in part]
