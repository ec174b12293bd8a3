# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled dense kernels.

Same surface as the NumPy fallback. Every accumulation runs over the
contraction index in ascending order, so results are bit-reproducible
run to run.
"""

import numpy as np


def mm_nn(double[:, ::1] a, double[:, ::1] b):
    """a @ b"""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aip
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out_arr


def mm_nt(double[:, ::1] a, double[:, ::1] b):
    """a @ b.T"""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out_arr


def mm_tn(double[:, ::1] a, double[:, ::1] b):
    """a.T @ b"""
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double api
    for p in range(k):
        for i in range(m):
            api = a[p, i]
            for j in range(n):
                out[i, j] += api * b[p, j]
    return out_arr
