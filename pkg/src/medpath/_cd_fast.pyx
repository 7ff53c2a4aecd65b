# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Cyclic coordinate-descent kernel for the partially penalized lasso.

Operates on a Fortran-ordered design so each coordinate's column is
contiguous.  A zero threshold makes the update an exact least-squares
step, so unpenalized coordinates share the code path.  Residual and
coefficient vectors are updated in place to support warm-started paths.
"""

import numpy as np

cimport cython
from libc.math cimport fabs


cdef inline double _soft(double x, double tau) noexcept nogil:
    if x > tau:
        return x - tau
    if x < -tau:
        return x + tau
    return 0.0


cdef double _sweep(const double* X, Py_ssize_t n, Py_ssize_t d,
                   double* r, double* beta,
                   const double* thresh, const double* colsq,
                   unsigned char* active, bint only_active) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double rho, bnew, db, s
    cdef double maxd = 0.0
    cdef const double* col
    for j in range(d):
        if only_active and active[j] == 0:
            continue
        s = colsq[j]
        if s <= 0.0:
            continue
        col = X + j * n
        rho = 0.0
        for i in range(n):
            rho += col[i] * r[i]
        rho = rho / n + beta[j] * s
        if thresh[j] > 0.0:
            bnew = _soft(rho, thresh[j]) / s
        else:
            bnew = rho / s
        db = bnew - beta[j]
        if db != 0.0:
            for i in range(n):
                r[i] -= db * col[i]
            beta[j] = bnew
        active[j] = 1 if (bnew != 0.0 or thresh[j] == 0.0) else 0
        if fabs(db) > maxd:
            maxd = fabs(db)
    return maxd


def cd_solve(double[::1, :] X, double[::1] r, double[::1] beta,
             double[::1] thresh, double[::1] colsq,
             double tol, long max_sweeps, bint use_active=True):
    """Run coordinate descent until a full sweep moves no coefficient by tol.

    Returns (sweeps_used, converged).  ``r`` must hold the residual for the
    incoming ``beta``; both are updated in place.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef long sweeps = 0
    cdef bint converged = False
    cdef double maxd
    active_arr = np.empty(d, dtype=np.uint8)
    cdef unsigned char[::1] active = active_arr
    cdef Py_ssize_t j
    for j in range(d):
        active[j] = 1 if (beta[j] != 0.0 or thresh[j] == 0.0) else 0

    with nogil:
        while sweeps < max_sweeps:
            maxd = _sweep(&X[0, 0], n, d, &r[0], &beta[0], &thresh[0],
                          &colsq[0], &active[0], False)
            sweeps += 1
            if maxd < tol:
                converged = True
                break
            if use_active:
                while sweeps < max_sweeps:
                    maxd = _sweep(&X[0, 0], n, d, &r[0], &beta[0], &thresh[0],
                                  &colsq[0], &active[0], True)
                    sweeps += 1
                    if maxd < tol:
                        break
    return sweeps, converged
