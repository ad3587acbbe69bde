"""Pure numpy cyclic Jacobi eigensolver (fallback for the compiled kernel)."""

import math

import numpy as np


def _offdiag_norm(a):
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return math.sqrt(float(np.sum(off * off)))


def jacobi_eigh(a, tol=1e-15, max_sweeps=100):
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v, sweeps)`` with eigenvalues in diagonal order (unsorted)
    and eigenvectors as columns of ``v``.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = math.sqrt(float(np.sum(a * a)))
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v, 0
    thresh = tol * scale

    for sweep in range(max_sweeps):
        off = _offdiag_norm(a)
        if off <= thresh:
            return np.diag(a).copy(), v, sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                g = 100.0 * abs(apq)
                app = a[p, p]
                aqq = a[q, q]
                if sweep > 3 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                h = aqq - app
                if abs(h) + g == abs(h):
                    t = apq / h
                else:
                    theta = 0.5 * h / apq
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    off = _offdiag_norm(a)
    if off > 1e3 * thresh:
        raise ArithmeticError("Jacobi sweep limit reached (off-diagonal norm %.3e)" % off)
    return np.diag(a).copy(), v, max_sweeps
