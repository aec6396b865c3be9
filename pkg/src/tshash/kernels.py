"""Hamming-distance kernels over bit-packed uint64 code words.

Two interchangeable backends: a numba-compiled scan and a pure-numpy
path.  Set ``TSHASH_NUMBA=0`` in the environment (before import) to force
the numpy path; otherwise numba is used when importable.  Both return
identical integer distances.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("TSHASH_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from numba import njit
    except ImportError:
        _WANT_NUMBA = False

USING_NUMBA = _WANT_NUMBA


def _hamming_matrix_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed code rows, [n_a, n_b] int32."""
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int32)
    # row-at-a-time keeps the XOR buffer at n_b x words instead of n_a x n_b x words
    for i in range(a.shape[0]):
        out[i] = np.bitwise_count(a[i][None, :] ^ b).sum(axis=1, dtype=np.int32)
    return out


if USING_NUMBA:

    @njit(cache=True)
    def _popcount64(x):
        m1 = np.uint64(0x5555555555555555)
        m2 = np.uint64(0x3333333333333333)
        m4 = np.uint64(0x0F0F0F0F0F0F0F0F)
        h01 = np.uint64(0x0101010101010101)
        x = x - ((x >> np.uint64(1)) & m1)
        x = (x & m2) + ((x >> np.uint64(2)) & m2)
        x = (x + (x >> np.uint64(4))) & m4
        return (x * h01) >> np.uint64(56)

    @njit(cache=True)
    def _hamming_matrix_numba(a, b):
        n, w = a.shape
        m = b.shape[0]
        out = np.empty((n, m), dtype=np.int32)
        for i in range(n):
            for j in range(m):
                acc = np.uint64(0)
                for k in range(w):
                    acc += _popcount64(a[i, k] ^ b[j, k])
                out[i, j] = np.int32(acc)
        return out

    def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.ascontiguousarray(a, dtype=np.uint64)
        b = np.ascontiguousarray(b, dtype=np.uint64)
        if a.shape[1] != b.shape[1]:
            raise ValueError("word counts differ: %d vs %d" % (a.shape[1], b.shape[1]))
        return _hamming_matrix_numba(a, b)

else:

    def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.ascontiguousarray(a, dtype=np.uint64)
        b = np.ascontiguousarray(b, dtype=np.uint64)
        if a.shape[1] != b.shape[1]:
            raise ValueError("word counts differ: %d vs %d" % (a.shape[1], b.shape[1]))
        return _hamming_matrix_numpy(a, b)


hamming_matrix.__doc__ = _hamming_matrix_numpy.__doc__
