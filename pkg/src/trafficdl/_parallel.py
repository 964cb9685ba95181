import os
from concurrent.futures import ProcessPoolExecutor


def default_workers():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def parallel_map(fn, items, workers=1):
    """``list(map(fn, items))`` with an optional process pool.

    Results come back in input order, so reductions over them are
    deterministic regardless of ``workers``.
    """
    items = list(items)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
