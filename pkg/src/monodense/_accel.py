"""Backend selection for the hot kernels.

Every kernel in :mod:`monodense.kernels` ships a numba implementation and a
pure-numpy one. The numba path is used unless ``MONODENSE_DISABLE_NUMBA`` is
set to a truthy value or numba cannot be imported. The flag is read at call
time so tests can flip it with ``monkeypatch.setenv``.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "MONODENSE_DISABLE_NUMBA"


def numba_enabled():
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with project defaults, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if numba_enabled() else "numpy"


def split_range(n, workers):
    """Contiguous ``(start, stop)`` chunks covering ``range(n)``."""
    workers = max(1, min(int(workers), max(n, 1)))
    bounds = [round(i * n / workers) for i in range(workers + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]


def run_chunked(fn, n, workers=1):
    """Call ``fn(start, stop)`` over chunks of ``range(n)``.

    Chunks must write disjoint outputs; results come back in chunk order so
    the combined output does not depend on the worker count.
    """
    chunks = split_range(n, workers)
    if len(chunks) <= 1:
        return [fn(a, b) for a, b in chunks]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(fn, a, b) for a, b in chunks]
        return [f.result() for f in futures]
