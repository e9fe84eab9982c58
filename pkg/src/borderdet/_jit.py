"""Numba dispatch switch.

Hot kernels are written once as plain loops and compiled with ``njit`` when
numba is importable. Setting ``BORDERDET_DISABLE_NUMBA=1`` selects the
vectorized numpy fallbacks instead; the flag is read once at import time.
"""
import os

_FLAG = os.environ.get("BORDERDET_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG not in ("", "0", "false", "no")

try:
    from numba import njit as _njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not DISABLED_BY_ENV


def njit(func):
    """Compile ``func`` in nopython mode if numba is present, else return it unchanged."""
    if not HAS_NUMBA:
        return func
    return _njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
