"""Numba dispatch.

Set ``ZONEBENCH_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful
when numba is missing or when debugging). The flag is read once at import.
"""

import os

DISABLE_ENV = "ZONEBENCH_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get(DISABLE_ENV, "") not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)
