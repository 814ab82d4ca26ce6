# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled LOF kernels: typed C loops over memoryviews.

Semantics match pmuattest._kernels.pure exactly (one zero-distance
candidate excluded per query, ties at the k-distance included, LARGE_LRD
sentinel for coincident neighborhoods).  Kept free of numpy C-API usage:
arrays are allocated from Python and filled through memoryviews.
"""

from libc.math cimport sqrt
from libc.stdlib cimport free, malloc, qsort

import numpy as np

LARGE_LRD = 1e10

cdef double _LARGE_LRD = 1e10


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*> a)[0]
    cdef double y = (<const double*> b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


cdef inline double _dist(const double[:, ::1] a, Py_ssize_t i,
                         const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double acc = 0.0
    cdef double d
    cdef Py_ssize_t m
    for m in range(a.shape[1]):
        d = a[i, m] - b[j, m]
        acc += d * d
    return sqrt(acc)


cdef double _kth_smallest(const double* values, Py_ssize_t n, int k) noexcept nogil:
    # qsort of a scratch copy; n is small (training sets of a few thousand).
    cdef double* scratch = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t i
    cdef double result
    for i in range(n):
        scratch[i] = values[i]
    qsort(scratch, n, sizeof(double), _cmp_double)
    result = scratch[k - 1]
    free(scratch)
    return result


def fit_structures(pts, int k):
    """Leave-self-out k-distance, lrd and LOF score for every training point."""
    points = np.ascontiguousarray(pts, dtype=np.float64)
    cdef double[:, ::1] x = points
    cdef Py_ssize_t n = x.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")

    kdist_arr = np.empty(n, dtype=np.float64)
    lrd_arr = np.empty(n, dtype=np.float64)
    score_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] kdist = kdist_arr
    cdef double[::1] lrd = lrd_arr
    cdef double[::1] score = score_arr

    cdef double* dist = <double*> malloc(n * n * sizeof(double))
    cdef double* row = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t i, j, m
    cdef double d, ksum, lsum
    cdef Py_ssize_t size

    with nogil:
        for i in range(n):
            for j in range(n):
                dist[i * n + j] = _dist(x, i, x, j)

        for i in range(n):
            m = 0
            for j in range(n):
                if j != i:
                    row[m] = dist[i * n + j]
                    m += 1
            kdist[i] = _kth_smallest(row, n - 1, k)

        for i in range(n):
            size = 0
            ksum = 0.0
            for j in range(n):
                if j != i and dist[i * n + j] <= kdist[i]:
                    size += 1
                    d = dist[i * n + j]
                    if kdist[j] > d:
                        d = kdist[j]
                    ksum += d
            if ksum > 0.0:
                lrd[i] = size / ksum
            else:
                lrd[i] = _LARGE_LRD

        for i in range(n):
            size = 0
            lsum = 0.0
            for j in range(n):
                if j != i and dist[i * n + j] <= kdist[i]:
                    size += 1
                    lsum += lrd[j]
            score[i] = lsum / (size * lrd[i])

    free(dist)
    free(row)
    return kdist_arr, lrd_arr, score_arr


def score_queries(pts, kd, ld, int k, qs):
    """LOF scores of query rows against fitted training structures."""
    points = np.ascontiguousarray(pts, dtype=np.float64)
    queries = np.ascontiguousarray(qs, dtype=np.float64)
    kdist_in = np.ascontiguousarray(kd, dtype=np.float64)
    lrd_in = np.ascontiguousarray(ld, dtype=np.float64)

    cdef double[:, ::1] x = points
    cdef double[:, ::1] q = queries
    cdef double[::1] kdist = kdist_in
    cdef double[::1] lrd = lrd_in
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nq = q.shape[0]

    out_arr = np.empty(nq, dtype=np.float64)
    cdef double[::1] out = out_arr

    cdef double* d = <double*> malloc(n * sizeof(double))
    cdef double* cand = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t qi, j, m, excluded
    cdef double kq, reach, ksum, lsum, lrd_q
    cdef Py_ssize_t size

    with nogil:
        for qi in range(nq):
            excluded = -1
            for j in range(n):
                d[j] = _dist(q, qi, x, j)
                if excluded < 0 and d[j] == 0.0:
                    excluded = j
            m = 0
            for j in range(n):
                if j != excluded:
                    cand[m] = d[j]
                    m += 1
            kq = _kth_smallest(cand, m, k)

            size = 0
            ksum = 0.0
            lsum = 0.0
            for j in range(n):
                if j != excluded and d[j] <= kq:
                    size += 1
                    reach = d[j]
                    if kdist[j] > reach:
                        reach = kdist[j]
                    ksum += reach
                    lsum += lrd[j]
            if ksum > 0.0:
                lrd_q = size / ksum
            else:
                lrd_q = _LARGE_LRD
            out[qi] = lsum / (size * lrd_q)

    free(d)
    free(cand)
    return out_arr
