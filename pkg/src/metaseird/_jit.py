"""numba switch.

Set ``METASEIRD_DISABLE_JIT=1`` to run the pure-numpy code paths even when
numba is installed.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_DISABLED = os.environ.get("METASEIRD_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not JIT_DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it untouched.

    Compilation happens even when the JIT is disabled by the environment
    flag, so benchmarks can still reach the compiled kernel; callers decide
    which path to take via :data:`USE_NUMBA`.
    """
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
