# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-cell kernels; mirrors ``_pykernels`` bit for bit."""
import numpy as np
from libc.stdint cimport uint64_t, int64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double INV53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t key, int64_t col) noexcept nogil:
    cdef uint64_t z = _mix(key + <uint64_t>(col + 1) * GOLDEN)
    return (<double>(z >> 11) + 0.5) * INV53


cdef inline Py_ssize_t _bisect_right(const double[::1] q, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = q.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x < q[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def uniforms(uint64_t key, int64_t ncols):
    out = np.empty(ncols, dtype=np.float64)
    cdef double[::1] o = out
    cdef int64_t c
    with nogil:
        for c in range(ncols):
            o[c] = _uniform(key, c)
    return out


def class_min(uint64_t key, int64_t ncols):
    cdef double me = 1.0, mo = 1.0, u
    cdef int64_t c
    with nogil:
        for c in range(ncols):
            u = _uniform(key, c)
            if c & 1:
                if u < mo:
                    mo = u
            elif u < me:
                me = u
    return me, mo


def count_below(uint64_t key, int64_t ncols, q_even, q_odd):
    cdef const double[::1] qe = np.ascontiguousarray(q_even, dtype=np.float64)
    cdef const double[::1] qo = np.ascontiguousarray(q_odd, dtype=np.float64)
    he = np.zeros(qe.shape[0] + 1, dtype=np.int64)
    ho = np.zeros(qo.shape[0] + 1, dtype=np.int64)
    cdef int64_t[::1] hev = he
    cdef int64_t[::1] hov = ho
    cdef int64_t c
    cdef double u
    with nogil:
        for c in range(ncols):
            u = _uniform(key, c)
            if c & 1:
                hov[_bisect_right(qo, u)] += 1
            else:
                hev[_bisect_right(qe, u)] += 1
    return np.cumsum(he)[: qe.shape[0]], np.cumsum(ho)[: qo.shape[0]]
