# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see ``scsr._pykernels`` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport isnan, floor
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _swap(double *buf, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double t = buf[i]
    buf[i] = buf[j]
    buf[j] = t


cdef double _select(double *buf, Py_ssize_t n, Py_ssize_t kth) noexcept nogil:
    """Quickselect: leaves the kth smallest at ``buf[kth]`` with larger-or-equal values after it."""
    cdef Py_ssize_t left = 0, right = n - 1, mid, i, j
    cdef double pivot, t
    while right > left:
        mid = left + (right - left) // 2
        # median of three as pivot, moved to buf[right]
        if buf[mid] < buf[left]:
            _swap(buf, mid, left)
        if buf[right] < buf[left]:
            _swap(buf, right, left)
        if buf[mid] < buf[right]:
            _swap(buf, mid, right)
        pivot = buf[right]
        i = left
        # branchless Lomuto: always swap, advance only when below the pivot
        for j in range(left, right):
            t = buf[j]
            buf[j] = buf[i]
            buf[i] = t
            i += t < pivot
        _swap(buf, i, right)
        if i == kth:
            break
        if i < kth:
            left = i + 1
        else:
            right = i - 1
    return buf[kth]


def centile_rows(double[:, ::1] values, double q):
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_cols = values.shape[1]
    cdef Py_ssize_t i, j, k, lo, hi
    cdef double r, frac, a, b
    out_arr = np.empty(n_rows, dtype=np.float64)
    unc_arr = np.zeros(n_rows, dtype=np.bool_)
    cdef double[::1] out = out_arr
    cdef cnp.npy_bool[::1] uncovered = unc_arr
    cdef double *buf = <double *>malloc(max(n_cols, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n_rows):
                k = 0
                for j in range(n_cols):
                    if not isnan(values[i, j]):
                        buf[k] = values[i, j]
                        k += 1
                if k == 0:
                    out[i] = 0.0
                    uncovered[i] = True
                    continue
                r = q * (k - 1)
                lo = <Py_ssize_t>floor(r)
                frac = r - lo
                a = _select(buf, k, lo)
                b = a
                if lo + 1 < k:
                    # next order statistic is the minimum of the upper partition
                    b = buf[lo + 1]
                    for hi in range(lo + 2, k):
                        if buf[hi] < b:
                            b = buf[hi]
                out[i] = a + frac * (b - a)
    finally:
        free(buf)
    return out_arr, unc_arr


def hop_voronoi(long long[::1] indptr, long long[::1] indices, long long[::1] seeds):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t n_seeds = seeds.shape[0]
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    cdef long long *frontier = <long long *>malloc(max(n, 1) * sizeof(long long))
    cdef long long *nxt = <long long *>malloc(max(n, 1) * sizeof(long long))
    cdef long long *tmp
    cdef Py_ssize_t n_front = 0, n_next, i, e, u, w
    if frontier == NULL or nxt == NULL:
        free(frontier)
        free(nxt)
        raise MemoryError()
    try:
        for i in range(n_seeds):
            labels[seeds[i]] = i
            frontier[n_front] = seeds[i]
            n_front += 1
        with nogil:
            while n_front > 0:
                n_next = 0
                # pass 1: claim unassigned neighbours with the smallest label
                for i in range(n_front):
                    u = frontier[i]
                    for e in range(indptr[u], indptr[u + 1]):
                        w = indices[e]
                        if labels[w] == -1:
                            labels[w] = -2 - labels[u]
                            nxt[n_next] = w
                            n_next += 1
                        elif labels[w] <= -2 and -2 - labels[w] > labels[u]:
                            labels[w] = -2 - labels[u]
                # pass 2: commit this level
                for i in range(n_next):
                    w = nxt[i]
                    labels[w] = -2 - labels[w]
                tmp = frontier
                frontier = nxt
                nxt = tmp
                n_front = n_next
    finally:
        free(frontier)
        free(nxt)
    return labels_arr
