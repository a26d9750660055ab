"""Kernel backend selection.

Hot kernels in :mod:`habfuse.kernels` exist in two flavors: numba
``@njit``-compiled loops and pure-numpy fallbacks. Selection happens once at
import time:

* ``HABFUSE_NUMBA=0`` (or ``false``/``off``/``no``) forces the numpy path.
* Otherwise numba is used when importable; a failed import falls back to
  numpy silently.

``HABFUSE_THREADS=N`` caps the numba threading layer. All shipped kernels are
single-threaded for bit-reproducibility, so this is a safety cap rather than
a tuning knob. Reproducibility guarantees (same seed, same bytes) hold per
backend; the numba and numpy paths may differ in floating-point rounding.
"""

import os

_FALSEY = {"0", "false", "off", "no"}


def _numba_requested() -> bool:
    return os.environ.get("HABFUSE_NUMBA", "1").strip().lower() not in _FALSEY


NUMBA_ENABLED = False
if _numba_requested():
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
        threads = os.environ.get("HABFUSE_THREADS")
        if threads:
            try:
                numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
            except ValueError:
                pass
    except ImportError:
        NUMBA_ENABLED = False


def active_backend() -> str:
    """Name of the kernel backend selected at import: ``numba`` or ``numpy``."""
    return "numba" if NUMBA_ENABLED else "numpy"
