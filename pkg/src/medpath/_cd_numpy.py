"""Pure-NumPy fallback for the coordinate-descent kernel.

Mirrors the compiled kernel's semantics exactly (same sweep order, same
update and convergence rules) so either backend yields the same fits, only
slower.  Selected automatically when the compiled extension is missing or
when ``MEDPATH_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np


def _sweep(X, n, d, r, beta, thresh, colsq, active, only_active):
    maxd = 0.0
    for j in range(d):
        if only_active and not active[j]:
            continue
        s = colsq[j]
        if s <= 0.0:
            continue
        col = X[:, j]
        rho = col @ r / n + beta[j] * s
        tau = thresh[j]
        if tau > 0.0:
            bnew = np.sign(rho) * max(abs(rho) - tau, 0.0) / s
        else:
            bnew = rho / s
        db = bnew - beta[j]
        if db != 0.0:
            r -= db * col
            beta[j] = bnew
        active[j] = bnew != 0.0 or tau == 0.0
        if abs(db) > maxd:
            maxd = abs(db)
    return maxd


def cd_solve(X, r, beta, thresh, colsq, tol, max_sweeps, use_active=True):
    """Drop-in replacement for :func:`medpath._cd_fast.cd_solve`."""
    n, d = X.shape
    active = (beta != 0.0) | (thresh == 0.0)
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        maxd = _sweep(X, n, d, r, beta, thresh, colsq, active, False)
        sweeps += 1
        if maxd < tol:
            converged = True
            break
        if use_active:
            while sweeps < max_sweeps:
                maxd = _sweep(X, n, d, r, beta, thresh, colsq, active, True)
                sweeps += 1
                if maxd < tol:
                    break
    return sweeps, converged
