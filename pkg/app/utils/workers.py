import os
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional
from django.conf import settings
from tqdm import tqdm

logger = logging.getLogger(__name__)


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, then UNCERTFLOW_THREADS, then logical cores"""
    if threads:
        return threads
    configured = getattr(settings, 'UNCERTFLOW_THREADS', 0)
    if configured:
        return configured
    return os.cpu_count() or 1


def parallel_map(func: Callable, items: Iterable, threads: Optional[int] = None,
                 progress: Optional[str] = None) -> List:
    """Apply ``func`` to every item on a thread pool; results keep input order"""
    items = list(items)
    workers = min(resolve_threads(threads), max(len(items), 1))
    bar = tqdm(total=len(items), desc=progress, disable=True if progress is None else None, leave=False)

    try:
        if workers <= 1:
            results = []
            for item in items:
                results.append(func(item))
                bar.update()
            return results

        logger.debug(f"Running {len(items)} tasks on {workers} threads")
        results = []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(func, items):
                results.append(result)
                bar.update()
        return results
    finally:
        bar.close()
