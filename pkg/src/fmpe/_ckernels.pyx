# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise and pairwise kernels.

Mirrors :mod:`fmpe._kernels_py` one-for-one; :mod:`fmpe.kernels` picks whichever
is importable.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu(cnp.ndarray z_in):
    """Return ``(gelu(z), gelu'(z))`` in one pass over ``z``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z = np.ascontiguousarray(z_in, dtype=np.float64).ravel()
    cdef Py_ssize_t n = z.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] a = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] da = np.empty(n)
    cdef double zi, cdf, pdf
    with nogil:
        for i in range(n):
            zi = z[i]
            cdf = 0.5 * erfc(-zi * INV_SQRT2)
            pdf = INV_SQRT_2PI * exp(-0.5 * zi * zi)
            a[i] = zi * cdf
            da[i] = cdf + zi * pdf
    shape = (<object>z_in).shape
    return a.reshape(shape), da.reshape(shape)


def sigmoid(cnp.ndarray z_in):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] z = np.ascontiguousarray(z_in, dtype=np.float64).ravel()
    cdef Py_ssize_t n = z.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s = np.empty(n)
    cdef double e
    with nogil:
        for i in range(n):
            # branch keeps exp() argument non-positive
            if z[i] >= 0:
                s[i] = 1.0 / (1.0 + exp(-z[i]))
            else:
                e = exp(z[i])
                s[i] = e / (1.0 + e)
    return s.reshape((<object>z_in).shape)


def rbf_pair_sum(cnp.ndarray x_in, cnp.ndarray y_in, double bandwidth, bint exclude_diagonal=False):
    """Sum of exp(-|x_i - y_j|^2 / (2 h^2)) over all (i, j) without forming the Gram matrix."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double scale = -0.5 / (bandwidth * bandwidth)
    cdef double total = 0.0, row, dist2, diff
    if y.shape[1] != d:
        raise ValueError("dimension mismatch")
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                if exclude_diagonal and i == j:
                    continue
                dist2 = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    dist2 = dist2 + diff * diff
                row = row + exp(scale * dist2)
            total = total + row
    return total
