"""Kernel backend selection.

Hot loops are compiled with numba when it is importable. Setting
``YOLOCS_DISABLE_NUMBA=1`` forces the pure-numpy path. Both paths accumulate
every output element in the same order, so results are bit-identical and the
flag only changes speed.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

_DISABLED = os.environ.get("YOLOCS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, identity decorator otherwise."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


if numba is not None:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
