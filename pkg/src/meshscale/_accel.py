"""Optional numba acceleration with a pure-numpy/Python fallback.

Hot kernels live in meshscale.kernels in two variants each. The active
variant is chosen once at import time: numba when it is importable and
the MESHSCALE_NO_NUMBA environment flag is not set. Both variants are
bitwise-equivalent by construction, so the flag only changes speed.
"""

from __future__ import annotations

import os


def _env_flag(name: str) -> bool:
    value = os.environ.get(name, "")
    return value.strip().lower() not in {"", "0", "false", "no"}


NUMBA_DISABLED = _env_flag("MESHSCALE_NO_NUMBA")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by MESHSCALE_NO_NUMBA")
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:

    def njit(*args, **kwargs):
        # Decorator shim: @njit and @njit(...) both become identity.
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    prange = range
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA
