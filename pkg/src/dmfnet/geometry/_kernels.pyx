# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled point-set kernels.

Every routine here has a bit-identical twin in ``_fallback.py``: squared
distances are accumulated coordinate by coordinate in index order, and ties
always resolve to the smaller index.
"""
import numpy as np
from libc.math cimport INFINITY


def pairwise_sq_dist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double acc, diff
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            diff = a[i, 0] - b[j, 0]
            acc = diff * diff
            for c in range(1, d):
                diff = a[i, c] - b[j, c]
                acc = acc + diff * diff
            o[i, j] = acc
    return out


def knn(const double[:, ::1] query, const double[:, ::1] ref, Py_ssize_t k):
    cdef Py_ssize_t n = query.shape[0], m = ref.shape[0], d = query.shape[1]
    cdef Py_ssize_t i, j, c, pos, filled
    cdef double acc, diff
    idx = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] out = idx
    cdef double[::1] best = np.empty(k, dtype=np.float64)
    for i in range(n):
        filled = 0
        for j in range(m):
            diff = query[i, 0] - ref[j, 0]
            acc = diff * diff
            for c in range(1, d):
                diff = query[i, c] - ref[j, c]
                acc = acc + diff * diff
            if filled == k and acc >= best[k - 1]:
                continue
            # insertion keeps earlier indices ahead on equal distance
            pos = filled if filled < k else k - 1
            while pos > 0 and best[pos - 1] > acc:
                best[pos] = best[pos - 1]
                out[i, pos] = out[i, pos - 1]
                pos -= 1
            best[pos] = acc
            out[i, pos] = j
            if filled < k:
                filled += 1
    return idx


def fps(const double[:, ::1] points, Py_ssize_t m):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1]
    cdef Py_ssize_t s, j, c, cur, nxt
    cdef double acc, diff, far
    chosen = np.empty(m, dtype=np.int64)
    cdef long long[::1] ch = chosen
    cdef double[::1] mind = np.full(n, INFINITY, dtype=np.float64)
    cur = 0
    for s in range(m):
        ch[s] = cur
        mind[cur] = -1.0
        if s == m - 1:
            break
        nxt = 0
        far = -INFINITY
        for j in range(n):
            if mind[j] >= 0.0:
                diff = points[j, 0] - points[cur, 0]
                acc = diff * diff
                for c in range(1, d):
                    diff = points[j, c] - points[cur, c]
                    acc = acc + diff * diff
                if acc < mind[j]:
                    mind[j] = acc
            if mind[j] > far:
                far = mind[j]
                nxt = j
        cur = nxt
    return chosen


def nearest(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, c, arg
    cdef double acc, diff, best
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cdef long long[::1] oi = idx
    cdef double[::1] od = dist
    for i in range(n):
        best = INFINITY
        arg = 0
        for j in range(m):
            diff = a[i, 0] - b[j, 0]
            acc = diff * diff
            for c in range(1, d):
                diff = a[i, c] - b[j, c]
                acc = acc + diff * diff
            if acc < best:
                best = acc
                arg = j
        oi[i] = arg
        od[i] = best
    return idx, dist
