"""Hot numeric kernels with numba and pure-numpy implementations.

Each kernel has a ``_numpy`` fallback and, when the backend allows it, an
``@njit`` twin. The public names dispatch to whichever
:func:`habfuse.backend.active_backend` selected at import. ``IMPLEMENTATIONS``
exposes both flavors for the benchmark script and for cross-backend tests.

Kernels are deliberately single-threaded with fixed accumulation order so a
given backend is bit-reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from . import backend

# ---------------------------------------------------------------------------
# numpy fallbacks

_ASSIGN_CHUNK = 4096  # caps the (chunk, k, D) broadcast at a few hundred MB


def _kmeans_assign_numpy(x: np.ndarray, centroids: np.ndarray):
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sqdist = np.empty(n, dtype=np.float64)
    for start in range(0, n, _ASSIGN_CHUNK):
        chunk = x[start : start + _ASSIGN_CHUNK]
        d2 = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels[start : start + _ASSIGN_CHUNK] = np.argmin(d2, axis=1)
        sqdist[start : start + _ASSIGN_CHUNK] = np.min(d2, axis=1)
    return labels, sqdist


def _accumulate_outer_numpy(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    return pa.T @ pb


def _gather_windows_numpy(data: np.ndarray, fill_value: float):
    nch, nrow, ncol = data.shape
    valid = np.all(data != fill_value, axis=0)
    win = np.ones((nrow - 2, ncol - 2), dtype=bool)
    for dr in range(3):
        for dc in range(3):
            win &= valid[dr : dr + nrow - 2, dc : dc + ncol - 2]
    rows, cols = np.nonzero(win)
    shifts = np.empty((nrow - 2, ncol - 2, nch * 9), dtype=data.dtype)
    pos = 0
    for ch in range(nch):
        for dr in range(3):
            for dc in range(3):
                shifts[:, :, pos] = data[ch, dr : dr + nrow - 2, dc : dc + ncol - 2]
                pos += 1
    vectors = shifts[win]
    return vectors, (rows + 1).astype(np.int32), (cols + 1).astype(np.int32)


# ---------------------------------------------------------------------------
# numba twins

if backend.NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True)
    def _kmeans_assign_numba(x, centroids):
        n, d = x.shape
        k = centroids.shape[0]
        labels = np.empty(n, dtype=np.int64)
        sqdist = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = 0
            best_d = np.inf
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - centroids[j, t]
                    acc += diff * diff
                if acc < best_d:
                    best_d = acc
                    best = j
            labels[i] = best
            sqdist[i] = best_d
        return labels, sqdist

    @njit(cache=True)
    def _accumulate_outer_numba(pa, pb):
        n, ca = pa.shape
        cb = pb.shape[1]
        out = np.zeros((ca, cb), dtype=np.float64)
        for i in range(n):
            for a in range(ca):
                va = pa[i, a]
                for b in range(cb):
                    out[a, b] += va * pb[i, b]
        return out

    @njit(cache=True)
    def _gather_windows_numba(data, fill_value):
        nch, nrow, ncol = data.shape
        max_n = (nrow - 2) * (ncol - 2)
        vectors = np.empty((max_n, nch * 9), dtype=data.dtype)
        rows = np.empty(max_n, dtype=np.int32)
        cols = np.empty(max_n, dtype=np.int32)
        count = 0
        for r in range(1, nrow - 1):
            for c in range(1, ncol - 1):
                ok = True
                for ch in range(nch):
                    for dr in range(-1, 2):
                        for dc in range(-1, 2):
                            if data[ch, r + dr, c + dc] == fill_value:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    continue
                pos = 0
                for ch in range(nch):
                    for dr in range(-1, 2):
                        for dc in range(-1, 2):
                            vectors[count, pos] = data[ch, r + dr, c + dc]
                            pos += 1
                rows[count] = r
                cols[count] = c
                count += 1
        return vectors[:count].copy(), rows[:count].copy(), cols[:count].copy()


# ---------------------------------------------------------------------------
# dispatch

IMPLEMENTATIONS: dict[str, dict] = {
    "numpy": {
        "kmeans_assign": _kmeans_assign_numpy,
        "accumulate_outer": _accumulate_outer_numpy,
        "gather_windows": _gather_windows_numpy,
    }
}
if backend.NUMBA_ENABLED:
    IMPLEMENTATIONS["numba"] = {
        "kmeans_assign": _kmeans_assign_numba,
        "accumulate_outer": _accumulate_outer_numba,
        "gather_windows": _gather_windows_numba,
    }

_ACTIVE = IMPLEMENTATIONS[backend.active_backend()]


def kmeans_assign(x: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid labels and squared distances; ties go to the lower index."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    return _ACTIVE["kmeans_assign"](x, centroids)


def accumulate_outer(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Sum of per-row outer products, ``sum_i outer(pa_i, pb_i)``."""
    pa = np.ascontiguousarray(pa, dtype=np.float64)
    pb = np.ascontiguousarray(pb, dtype=np.float64)
    return _ACTIVE["accumulate_outer"](pa, pb)


def gather_windows(data: np.ndarray, fill_value: float):
    """All fill-free 3x3 windows of a (channels, rows, cols) raster.

    Returns ``(vectors, rows, cols)`` where each vector is channel-major then
    row-major over the window, in row-major scan order of window centers.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    return _ACTIVE["gather_windows"](data, np.float32(fill_value))


def warmup() -> None:
    """Force JIT compilation of every kernel (no-op on the numpy backend)."""
    x = np.zeros((4, 3))
    c = np.zeros((2, 3))
    kmeans_assign(x, c)
    accumulate_outer(np.full((2, 2), 0.5), np.full((2, 2), 0.5))
    gather_windows(np.zeros((1, 3, 3), dtype=np.float32), -9999.0)
