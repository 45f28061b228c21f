"""Numba switch for the fused kernels.

Set ``RMFN_NUMBA=0`` before import to run every kernel as plain numpy.
The flag is read once; both paths execute the same source.
"""
import os

_flag = os.environ.get("RMFN_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def kernel(fn):
    """Compile ``fn`` with numba when enabled, else return it untouched."""
    if USE_NUMBA:
        return _njit(cache=True, nogil=True)(fn)
    return fn
