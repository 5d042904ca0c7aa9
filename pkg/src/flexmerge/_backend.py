"""Select the numba or pure-numpy implementation of the hot kernels.

Set ``FLEXMERGE_NUMBA=0`` to force the numpy path.  When numba is not
importable the numpy path is used regardless of the flag.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def numba_requested() -> bool:
    flag = os.environ.get("FLEXMERGE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


def use_numba() -> bool:
    return HAVE_NUMBA and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn

