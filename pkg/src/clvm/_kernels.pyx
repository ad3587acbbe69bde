# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled cyclic Jacobi eigensolver.

Same rotation order and stopping rule as ``clvm._jacobi_py.jacobi_eigh``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, copysign

cnp.import_array()


cdef double _offdiag_norm(double[:, ::1] a, Py_ssize_t n) nogil:
    cdef Py_ssize_t i, j
    cdef double acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                acc += a[i, j] * a[i, j]
    return sqrt(acc)


def jacobi_eigh(a_in, double tol=1e-15, int max_sweeps=100):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a_arr = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = a_arr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t i, p, q
    cdef int sweep
    cdef double scale = 0.0, thresh, off, apq, theta, t, c, s, x, y, g, h, app, aqq

    for p in range(n):
        for q in range(n):
            scale += a[p, q] * a[p, q]
    scale = sqrt(scale)
    if n < 2 or scale == 0.0:
        return np.diag(a_arr).copy(), v_arr, 0
    thresh = tol * scale

    with nogil:
        for sweep in range(max_sweeps):
            off = _offdiag_norm(a, n)
            if off <= thresh:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    g = 100.0 * fabs(apq)
                    app = a[p, p]
                    aqq = a[q, q]
                    if sweep > 3 and fabs(app) + g == fabs(app) and fabs(aqq) + g == fabs(aqq):
                        a[p, q] = 0.0
                        a[q, p] = 0.0
                        continue
                    h = aqq - app
                    if fabs(h) + g == fabs(h):
                        t = apq / h
                    else:
                        theta = 0.5 * h / apq
                        t = copysign(1.0, theta) / (fabs(theta) + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for i in range(n):
                        x = a[i, p]
                        y = a[i, q]
                        a[i, p] = c * x - s * y
                        a[i, q] = s * x + c * y
                    for i in range(n):
                        x = a[p, i]
                        y = a[q, i]
                        a[p, i] = c * x - s * y
                        a[q, i] = s * x + c * y
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for i in range(n):
                        x = v[i, p]
                        y = v[i, q]
                        v[i, p] = c * x - s * y
                        v[i, q] = s * x + c * y
        else:
            sweep = max_sweeps

    if sweep == max_sweeps:
        off = _offdiag_norm(a, n)
        if off > 1e3 * thresh:
            raise ArithmeticError("Jacobi sweep limit reached (off-diagonal norm %.3e)" % off)
    return np.diag(a_arr).copy(), v_arr, sweep
