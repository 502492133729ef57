# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel for the relaxed-boundary soft-minimum alignment DP.

Same contract as ``_softdp_py``: dp_forward / dp_grad on (B, R, C) float64
cost batches. The per-cell recursion is inherently sequential, which is why
this lives in a compiled extension.
"""

from libc.math cimport exp, log, INFINITY, isfinite

import numpy as np


cdef inline double _softmin4(double a, double b, double c, double d,
                             double gamma, int n) nogil:
    # Soft minimum of the first n of (a, b, c, d).
    cdef double vals[4]
    cdef double lo, total
    cdef int idx
    vals[0] = a
    vals[1] = b
    vals[2] = c
    vals[3] = d
    lo = vals[0]
    for idx in range(1, n):
        if vals[idx] < lo:
            lo = vals[idx]
    if not isfinite(lo):
        return INFINITY
    total = 0.0
    for idx in range(n):
        total += exp(-(vals[idx] - lo) / gamma)
    return lo - gamma * log(total)


def dp_forward(costs, double gamma):
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    acc_arr = np.full(costs.shape, np.inf)
    values_arr = np.empty(costs.shape[0])

    cdef double[:, :, ::1] cost_v = costs
    cdef double[:, :, ::1] acc = acc_arr
    cdef double[::1] values = values_arr
    cdef Py_ssize_t batch = cost_v.shape[0]
    cdef Py_ssize_t n_rows = cost_v.shape[1]
    cdef Py_ssize_t n_cols = cost_v.shape[2]
    cdef Py_ssize_t last = n_cols - 1
    cdef Py_ssize_t k, i, j
    cdef double p0, p1, p2, p3, best, total
    cdef int n

    with nogil:
        for k in range(batch):
            for i in range(n_rows):
                for j in range(n_cols):
                    n = 0
                    p0 = p1 = p2 = p3 = 0.0
                    if j == 0:
                        p0 = 0.0
                        n = 1
                    if i > 0:
                        if j > 0:
                            if n == 0:
                                p0 = acc[k, i - 1, j - 1]
                            else:
                                p1 = acc[k, i - 1, j - 1]
                            n += 1
                        if n == 0:
                            p0 = acc[k, i - 1, j]
                        elif n == 1:
                            p1 = acc[k, i - 1, j]
                        else:
                            p2 = acc[k, i - 1, j]
                        n += 1
                    if j == last and j > 0:
                        if n == 0:
                            p0 = acc[k, i, j - 1]
                        elif n == 1:
                            p1 = acc[k, i, j - 1]
                        elif n == 2:
                            p2 = acc[k, i, j - 1]
                        else:
                            p3 = acc[k, i, j - 1]
                        n += 1
                    if n > 0:
                        acc[k, i, j] = cost_v[k, i, j] + _softmin4(p0, p1, p2, p3, gamma, n)
            # soft minimum over the last column = free exit row
            best = acc[k, 0, last]
            for i in range(1, n_rows):
                if acc[k, i, last] < best:
                    best = acc[k, i, last]
            if not isfinite(best):
                values[k] = INFINITY
            else:
                total = 0.0
                for i in range(n_rows):
                    total += exp(-(acc[k, i, last] - best) / gamma)
                values[k] = best - gamma * log(total)
    return values_arr, acc_arr


def dp_grad(costs, acc_arr, values_arr, double gamma):
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    acc_arr = np.ascontiguousarray(acc_arr, dtype=np.float64)
    values_arr = np.ascontiguousarray(values_arr, dtype=np.float64)
    grads_arr = np.zeros(costs.shape)

    cdef double[:, :, ::1] cost_v = costs
    cdef double[:, :, ::1] acc = acc_arr
    cdef double[::1] values = values_arr
    cdef double[:, :, ::1] grads = grads_arr
    cdef Py_ssize_t batch = cost_v.shape[0]
    cdef Py_ssize_t n_rows = cost_v.shape[1]
    cdef Py_ssize_t n_cols = cost_v.shape[2]
    cdef Py_ssize_t last = n_cols - 1
    cdef Py_ssize_t k, i, j
    cdef double here, child, e

    with nogil:
        for k in range(batch):
            for i in range(n_rows - 1, -1, -1):
                for j in range(n_cols - 1, -1, -1):
                    here = acc[k, i, j]
                    if not isfinite(here):
                        continue
                    e = 0.0
                    if j == last:
                        e += exp((values[k] - here) / gamma)
                    if i + 1 < n_rows and j + 1 < n_cols:
                        child = acc[k, i + 1, j + 1]
                        if isfinite(child):
                            e += exp((child - cost_v[k, i + 1, j + 1] - here) / gamma) * grads[k, i + 1, j + 1]
                    if i + 1 < n_rows:
                        child = acc[k, i + 1, j]
                        if isfinite(child):
                            e += exp((child - cost_v[k, i + 1, j] - here) / gamma) * grads[k, i + 1, j]
                    if j + 1 == last:
                        child = acc[k, i, j + 1]
                        if isfinite(child):
                            e += exp((child - cost_v[k, i, j + 1] - here) / gamma) * grads[k, i, j + 1]
                    grads[k, i, j] = e
    return grads_arr
