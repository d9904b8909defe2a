# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of fedq._kernels.reference.

Bit-identical to the numpy kernels by construction: the bracket search
reproduces numpy's searchsorted(side="right") and the rounding
probability is computed with the same float64 operations.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _bracket_right(const double* centers, Py_ssize_t k, double x) nogil:
    # First index with centers[i] > x, minus one (numpy searchsorted "right").
    cdef Py_ssize_t lo = 0
    cdef Py_ssize_t hi = k
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if centers[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo - 1


def stochastic_round(values, centers, uniforms):
    """See fedq._kernels.reference.stochastic_round."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t k = c.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef double x, p
    cdef const double* cp = <const double*> c.data
    if k == 1:
        out[:] = 0
        return out
    with nogil:
        for i in range(n):
            x = (<const double*> v.data)[i]
            j = _bracket_right(cp, k, x)
            if j < 0:
                out[i] = 0
            elif j >= k - 1:
                out[i] = k - 1
            else:
                p = (x - cp[j]) / (cp[j + 1] - cp[j])
                if (<const double*> u.data)[i] < p:
                    out[i] = j + 1
                else:
                    out[i] = j
    return out


def expected_sq_error(values, centers):
    """See fedq._kernels.reference.expected_sq_error."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t k = c.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double x, d
    cdef const double* cp = <const double*> c.data
    with nogil:
        for i in range(n):
            x = (<const double*> v.data)[i]
            if k == 1:
                d = x - cp[0]
                out[i] = d * d
                continue
            j = _bracket_right(cp, k, x)
            if j < 0:
                d = x - cp[0]
                out[i] = d * d
            elif j >= k - 1:
                d = x - cp[k - 1]
                out[i] = d * d
            else:
                out[i] = (x - cp[j]) * (cp[j + 1] - x)
    return out
