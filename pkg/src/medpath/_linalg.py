"""Internal linear-algebra helpers for the factor model and sandwich pieces.

The implied mediator covariance is diagonal-plus-low-rank, so its inverse
is kept in the Woodbury-factored form ``inv(S) = D^-1 - F H'`` with
``H = D^-1 G`` and ``F = H inv(I + G' H)``; nothing here materializes a
p x p inverse unless explicitly asked to.
"""

from __future__ import annotations

import numpy as np


class FactoredInverse:
    """Woodbury-factored inverse of ``loading @ loading.T + diag(uniq)``."""

    def __init__(self, loading: np.ndarray, uniq: np.ndarray):
        loading = np.asarray(loading, dtype=float)
        uniq = np.asarray(uniq, dtype=float)
        if np.any(uniq <= 0):
            raise np.linalg.LinAlgError("uniqueness entries must be positive")
        self.loading = loading
        self.uniq = uniq
        scale = float(np.max(np.sum(loading**2, axis=1) + uniq, initial=0.0))
        if np.min(uniq) < 1e-12 * scale:
            raise np.linalg.LinAlgError("implied covariance is numerically singular")
        self.H = loading / uniq[:, None]            # D^-1 G        (p, t)
        self.core = np.eye(loading.shape[1]) + loading.T @ self.H  # I + G'D^-1 G
        if not np.all(np.isfinite(self.core)):
            raise np.linalg.LinAlgError("implied covariance is numerically singular")
        self.F = np.linalg.solve(self.core.T, self.H.T).T          # H core^-1  (p, t)

    def logdet(self) -> float:
        sign, ld = np.linalg.slogdet(self.core)
        if sign <= 0:
            raise np.linalg.LinAlgError("implied covariance is not positive definite")
        return float(ld + np.sum(np.log(self.uniq)))

    def solve(self, v: np.ndarray) -> np.ndarray:
        """inv(S) @ v for a vector or matrix v."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return v / self.uniq - self.F @ (self.H.T @ v)
        return v / self.uniq[:, None] - self.F @ (self.H.T @ v)

    def dense(self) -> np.ndarray:
        """Materialized p x p inverse (small-p diagnostics only)."""
        return np.diag(1.0 / self.uniq) - self.F @ self.H.T

    def quad_diag(self, T: np.ndarray) -> np.ndarray:
        """diag(inv(S) @ T @ inv(S)) without a p x p product.

        Expands (D^-1 - FH')(T)(D^-1 - FH') using the symmetry of FH'.
        """
        d = 1.0 / self.uniq
        TF = T @ self.F
        cross = d * np.sum(TF * self.H, axis=1)
        W = self.H.T @ TF                      # H'TF  (t, t)
        term4 = np.sum((self.F @ W) * self.H, axis=1)
        return np.diag(T) * d * d - 2.0 * cross + term4

    def quad_apply(self, T: np.ndarray, V: np.ndarray) -> np.ndarray:
        """(inv(S) @ T @ inv(S)) @ V without a p x p product."""
        return self.solve(T @ self.solve(V))

    def trace_product(self, T: np.ndarray) -> float:
        """tr(T @ inv(S))."""
        return float(np.sum(np.diag(T) / self.uniq) - np.sum((T @ self.F) * self.H))


def woodbury_delta(loading: np.ndarray, uniq: np.ndarray) -> np.ndarray:
    """(G G' + diag(u))^-1 G via inv(u) G (I + G' inv(u) G)^-1."""
    fi = FactoredInverse(loading, uniq)
    return np.linalg.solve(fi.core.T, fi.H.T).T
