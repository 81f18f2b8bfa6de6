"""Optional numba acceleration.

Set ``VARCAST_NUMBA=0`` to run every kernel on the pure numpy/Python path.
The flag is read once at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("VARCAST_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise the identity decorator."""
    if USE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def python_func(f):
    """Return the interpreted body of a (possibly jitted) kernel."""
    return getattr(f, "py_func", f)
