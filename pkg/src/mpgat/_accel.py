"""Optional numba acceleration.

Hot kernels are written once as plain loops and compiled with ``numba.njit``
when numba is importable and ``MPGAT_NUMBA`` is not set to ``0``.  Every
kernel also has a vectorised numpy twin; ``kernels.py`` picks one at import.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_requested():
    flag = os.environ.get("MPGAT_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(fn):
    """Compile ``fn`` in nopython mode, or return it untouched without numba."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
