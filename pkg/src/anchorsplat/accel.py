"""Optional numba acceleration for the hot blending kernels.

The rasterizer's per-pixel loops are compiled with ``numba.njit`` when numba
is importable. Setting the environment variable ``ANCHORSPLAT_NO_NUMBA=1``
(before import) forces the pure-numpy fallback implementations instead; the
two paths compute the same blending, so everything keeps working, just
slower. ``benchmarks/bench_blend.py`` compares the two.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("ANCHORSPLAT_NO_NUMBA", "0").strip().lower()
NUMBA_ENABLED = HAVE_NUMBA and _flag not in ("1", "true", "yes")


def njit_kernel(func):
    """Return a jitted copy of func, or None when numba is unavailable."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True)(func)
