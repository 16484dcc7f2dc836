"""Hot numeric kernels: popcount over uint32 arrays and batched Welford updates.

Each kernel has a numba ``@njit`` version and a pure-numpy version.  The
numpy path is used when numba is missing or when ``LEAKFIX_NO_NUMBA=1`` is
set in the environment.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("LEAKFIX_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by LEAKFIX_NO_NUMBA")
    from numba import njit

    NUMBA_OK = True
except ImportError:
    NUMBA_OK = False


def popcount_numpy(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.uint32)).astype(np.int64)


def welford_batch_numpy(n, mean, m2, x):
    """Fold a (rows, cols) block of samples into per-column accumulators.

    The block is reduced with a two-pass mean/variance and merged with the
    running state using the pairwise update, so the result equals a sample-by-
    sample Welford pass up to round-off.
    """
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[0]
    if k == 0:
        return n, mean, m2
    bmean = x.mean(axis=0)
    bm2 = ((x - bmean) ** 2).sum(axis=0)
    tot = n + k
    delta = bmean - mean
    new_mean = mean + delta * (k / tot)
    new_m2 = m2 + bm2 + delta * delta * (n * k / tot)
    return tot, new_mean, new_m2


if NUMBA_OK:

    @njit(cache=True)
    def _popcount_nb(x):
        out = np.empty(x.shape[0], dtype=np.int64)
        for i in range(x.shape[0]):
            v = np.uint32(x[i])
            v = v - ((v >> np.uint32(1)) & np.uint32(0x55555555))
            v = (v & np.uint32(0x33333333)) + ((v >> np.uint32(2)) & np.uint32(0x33333333))
            v = (v + (v >> np.uint32(4))) & np.uint32(0x0F0F0F0F)
            out[i] = np.int64(((v * np.uint32(0x01010101)) >> np.uint32(24)) & np.uint32(0xFF))
        return out

    @njit(cache=True)
    def _welford_nb(n, mean, m2, x):
        cols = x.shape[1]
        new_mean = mean.copy()
        new_m2 = m2.copy()
        cnt = n
        for r in range(x.shape[0]):
            cnt += 1
            for c in range(cols):
                v = x[r, c]
                d = v - new_mean[c]
                new_mean[c] += d / cnt
                new_m2[c] += d * (v - new_mean[c])
        return cnt, new_mean, new_m2

    def popcount_numba(x: np.ndarray) -> np.ndarray:
        a = np.ascontiguousarray(x, dtype=np.uint32)
        return _popcount_nb(a.ravel()).reshape(a.shape)

    def welford_batch_numba(n, mean, m2, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            return n, mean, m2
        return _welford_nb(
            int(n),
            np.ascontiguousarray(mean, dtype=np.float64),
            np.ascontiguousarray(m2, dtype=np.float64),
            x,
        )

    popcount = popcount_numba
    welford_batch = welford_batch_numba
else:
    popcount_numba = None
    welford_batch_numba = None
    popcount = popcount_numpy
    welford_batch = welford_batch_numpy

BACKEND = "numba" if NUMBA_OK else "numpy"

__all__ = [
    "BACKEND",
    "NUMBA_OK",
    "popcount",
    "popcount_numpy",
    "popcount_numba",
    "welford_batch",
    "welford_batch_numpy",
    "welford_batch_numba",
]
