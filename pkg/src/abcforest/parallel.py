"""Process-pool job runner with index-ordered merge."""
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor


def _context():
    methods = mp.get_all_start_methods()
    return mp.get_context("fork" if "fork" in methods else methods[0])


def run_jobs(fn, args_list, workers=1, chunksize=None):
    """Evaluate ``fn(*args)`` for each entry and return results in input order.

    ``fn`` must be a module-level function.  Results never depend on
    ``workers``: every job is expected to seed itself from its own arguments.
    """
    args_list = list(args_list)
    workers = max(1, int(workers or 1))
    if workers == 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    if chunksize is None:
        chunksize = max(1, len(args_list) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=_context()) as ex:
        return list(ex.map(fn, *zip(*args_list), chunksize=chunksize))


def default_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
