"""Numba switch.

Set ``MLIP_NUMBA=0`` in the environment before importing :mod:`mlip` to run
every kernel through its pure-numpy path.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_enabled() -> bool:
    flag = os.environ.get("MLIP_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


USE_NUMBA = HAS_NUMBA and _env_enabled()


def njit(fn):
    """``numba.njit(cache=True)`` when numba is available, else identity."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
