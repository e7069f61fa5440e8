# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef double _macro(const long long* tp, const long long* fp, const long long* fn, Py_ssize_t k) noexcept nogil:
    cdef double total = 0.0, denom
    cdef Py_ssize_t j
    for j in range(k):
        denom = 2.0 * tp[j] + <double>fp[j] + <double>fn[j]
        if denom > 0:
            total += 2.0 * tp[j] / denom
        else:
            total += 0.0
    return total / k


def macro_from_counts(tp, fp, fn):
    tp = np.asarray(tp, dtype=np.float64)
    denom = 2.0 * tp + np.asarray(fp, dtype=np.float64) + np.asarray(fn, dtype=np.float64)
    f1 = np.zeros_like(tp)
    nz = denom > 0
    f1[nz] = 2.0 * tp[nz] / denom[nz]
    cdef double total = 0.0
    for v in f1.tolist():
        total += v
    return f1, total / len(f1)


def confusion_matrix(pred, truth, Py_ssize_t num_classes):
    cdef const long long[::1] p = np.ascontiguousarray(pred, dtype=np.int64)
    cdef const long long[::1] t = np.ascontiguousarray(truth, dtype=np.int64)
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef long long[:, ::1] cm = out
    cdef Py_ssize_t i, n = p.shape[0]
    with nogil:
        for i in range(n):
            cm[t[i], p[i]] += 1
    return out


def bias_sweep(logp, truth, bias, Py_ssize_t c, grid):
    cdef const double[:, ::1] lp = np.ascontiguousarray(logp, dtype=np.float64)
    cdef const long long[::1] y = np.ascontiguousarray(truth, dtype=np.int64)
    cdef const double[::1] b = np.ascontiguousarray(bias, dtype=np.float64)
    cdef const double[::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t n = lp.shape[0], k = lp.shape[1], ng = g.shape[0]
    cdef Py_ssize_t i, j, gi, pred, best
    cdef double m, v, s
    out = np.empty(ng, dtype=np.float64)
    cdef double[::1] res = out
    m_other_arr = np.empty(n, dtype=np.float64)
    best_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] m_other = m_other_arr
    cdef long long[::1] best_other = best_arr
    cdef long long* tp = <long long*> malloc(k * sizeof(long long))
    cdef long long* fp = <long long*> malloc(k * sizeof(long long))
    cdef long long* fn = <long long*> malloc(k * sizeof(long long))
    if tp == NULL or fp == NULL or fn == NULL:
        free(tp); free(fp); free(fn)
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                best = -1
                m = 0.0
                for j in range(k):
                    if j == c:
                        continue
                    v = lp[i, j] + b[j]
                    if best < 0 or v > m:
                        m = v
                        best = j
                m_other[i] = m
                best_other[i] = best
            for gi in range(ng):
                for j in range(k):
                    tp[j] = 0; fp[j] = 0; fn[j] = 0
                for i in range(n):
                    s = lp[i, c] + g[gi]
                    if s > m_other[i] or (s == m_other[i] and c < best_other[i]):
                        pred = c
                    else:
                        pred = best_other[i]
                    if pred == y[i]:
                        tp[pred] += 1
                    else:
                        fp[pred] += 1
                        fn[y[i]] += 1
                res[gi] = _macro(tp, fp, fn, k)
    finally:
        free(tp); free(fp); free(fn)
    return out


def threshold_sweep(scores, truth, grid):
    cdef const double[::1] sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const long long[::1] y = np.ascontiguousarray(truth, dtype=np.int64)
    cdef const double[::1] g = np.ascontiguousarray(grid, dtype=np.float64)
    cdef Py_ssize_t n = sc.shape[0], ng = g.shape[0], i, gi
    cdef long long tp, npos, ntrue = 0, fp, fn, denom, p
    cdef double t
    out = np.empty(ng, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for i in range(n):
            ntrue += y[i] != 0
        for gi in range(ng):
            t = g[gi]
            tp = 0; npos = 0
            for i in range(n):
                p = sc[i] >= t
                npos += p
                tp += p & (y[i] != 0)
            fp = npos - tp
            fn = ntrue - tp
            denom = 2 * tp + fp + fn
            res[gi] = 2.0 * tp / denom if denom > 0 else 0.0
    return out


def window_mean(x, Py_ssize_t half):
    cdef const double[:, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], t, o, j, src
    out = np.zeros((n, k), dtype=np.float64)
    if half <= 0 or n == 0:
        out[...] = a
        return out
    cdef double[:, ::1] r = out
    cdef double cnt
    with nogil:
        for t in range(n):
            cnt = 0.0
            for o in range(-half, half + 1):
                src = t + o
                if src < 0 or src >= n:
                    continue
                for j in range(k):
                    r[t, j] += a[src, j]
                cnt += 1.0
            for j in range(k):
                r[t, j] = r[t, j] / cnt
    return out


def scatter_mean(index, values, Py_ssize_t n):
    cdef const long long[::1] idx = np.ascontiguousarray(index, dtype=np.int64)
    cdef const double[::1] val = np.ascontiguousarray(values, dtype=np.float64)
    sums_arr = np.zeros(n, dtype=np.float64)
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef double[::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, m = idx.shape[0]
    for i in range(m):
        if idx[i] < 0 or idx[i] >= n:
            raise IndexError(f"index {idx[i]} out of range for {n} targets")
    with nogil:
        for i in range(m):
            sums[idx[i]] += val[i]
            counts[idx[i]] += 1
    return sums_arr, counts_arr
