"""numba shim.

Set ``OCLTTT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""
import logging
import os

_FLAG = os.environ.get("OCLTTT_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(func):
    if HAVE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(func)
    return func


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
