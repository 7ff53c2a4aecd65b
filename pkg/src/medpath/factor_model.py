"""Quasi-maximum-likelihood factor analysis of mediator residuals.

The quasi-log-likelihood maximized here is
``l(G, u) = -log|S| - tr(T S^-1)`` with ``S = G G' + diag(u)`` and ``T``
the second-moment matrix of the residuals.  Normality is a device only;
no distributional checks are run.  The loading matrix is reported in the
rotation-fixed form where ``G' diag(u)^-1 G`` is diagonal with decreasing
positive entries.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from ._linalg import FactoredInverse
from .core_types import ValidationError

MAX_EM_ITERATIONS = 2000
LOGLIK_RTOL = 1e-9
GRADIENT_TOL = 1e-5
UNIQUENESS_FLOOR_FRAC = 1e-4  # of the mean residual second moment (Heywood guard)


@dataclass(frozen=True)
class FactorFit:
    """Rotation-fixed loadings and uniquenesses with convergence diagnostics."""

    loading: NDArray[np.float64]
    uniqueness: NDArray[np.float64]
    t: int
    loglik: float
    iterations: int
    converged: bool
    grad_max: float = np.nan
    loglik_path: NDArray[np.float64] = field(default_factory=lambda: np.empty(0))
    rotation_warning: bool = False

    @property
    def p(self) -> int:
        return self.loading.shape[0]

    def implied_covariance(self) -> np.ndarray:
        return self.loading @ self.loading.T + np.diag(self.uniqueness)

    def to_report(self) -> dict:
        return {
            "t": self.t,
            "loading": self.loading.tolist(),
            "uniqueness": self.uniqueness.tolist(),
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_max": self.grad_max,
            "rotation_warning": self.rotation_warning,
        }


def second_moment(residuals: np.ndarray) -> np.ndarray:
    """Sample second-moment matrix of the residuals (denominator n)."""
    residuals = np.asarray(residuals, dtype=float)
    return residuals.T @ residuals / residuals.shape[0]


def loglik_value(T: np.ndarray, loading: np.ndarray, uniq: np.ndarray) -> float:
    fi = FactoredInverse(loading, uniq)
    return -fi.logdet() - fi.trace_product(T)


def loglik_gradient(T: np.ndarray, loading: np.ndarray, uniq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the quasi-log-likelihood in (loading, uniqueness)."""
    fi = FactoredInverse(loading, uniq)
    # d l / d S = S^-1 T S^-1 - S^-1
    grad_loading = 2.0 * (fi.quad_apply(T, loading) - fi.solve(loading))
    diag_inv = 1.0 / uniq - np.sum(fi.F * fi.H, axis=1)
    grad_uniq = fi.quad_diag(T) - diag_inv
    return grad_loading, grad_uniq


def _pc_init(T: np.ndarray, t: int, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Principal-component start: top eigenvectors scaled by root excess eigenvalue."""
    evals, evecs = np.linalg.eigh(T)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    noise = float(np.mean(evals[t:])) if T.shape[0] > t else 0.0
    excess = np.sqrt(np.maximum(evals[:t] - noise, floor))
    loading = evecs[:, :t] * excess
    uniq = np.maximum(np.diag(T) - np.sum(loading**2, axis=1), floor)
    return loading, uniq


def fit_factor(residuals: np.ndarray, t: int) -> FactorFit:
    """EM fit of the t-factor model to mediator residuals.

    Parameters
    ----------
    residuals : (n, p) residual matrix from the mediator regression.
    t : factor count; requires p >= 2t + 1.

    Returns
    -------
    FactorFit with rotation-fixed loadings.  ``converged`` is False when the
    iteration budget runs out or the stationarity check (max absolute
    gradient entry <= 1e-5) fails, e.g. at a floored Heywood solution.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim != 2:
        raise ValidationError("residuals must be a 2-d matrix")
    p = residuals.shape[1]
    if t < 1:
        raise ValidationError(f"factor count must be at least 1, got {t}")
    if p < 2 * t + 1:
        raise ValidationError(f"need p >= 2t+1 mediators for t={t} factors, got p={p}")

    # normalize the overall scale so the fixed tolerances (and the EM fit)
    # are exactly scale-equivariant; outputs are rescaled on return
    T_raw = second_moment(residuals)
    scale = float(np.sqrt(np.mean(np.diag(T_raw))))
    if scale <= 0:
        raise ValidationError("residual matrix is identically zero")
    T = T_raw / scale**2
    floor = UNIQUENESS_FLOOR_FRAC * float(np.mean(np.diag(T)))
    loading, uniq = _pc_init(T, t, floor)

    path = [loglik_value(T, loading, uniq)]
    loglik_converged = False
    grad_max = np.inf
    it = 0
    for it in range(1, MAX_EM_ITERATIONS + 1):
        fi = FactoredInverse(loading, uniq)
        beta_post = np.linalg.solve(fi.core, fi.H.T)        # G'S^-1  (t, p)
        S_mf = T @ beta_post.T                              # (p, t)
        S_ff = np.eye(t) - beta_post @ loading + beta_post @ S_mf
        loading = np.linalg.solve(S_ff.T, S_mf.T).T
        uniq = np.maximum(np.diag(T) - np.sum(loading * S_mf, axis=1), floor)
        ll = loglik_value(T, loading, uniq)
        path.append(ll)
        if abs(ll - path[-2]) < LOGLIK_RTOL * (abs(path[-2]) + 1e-12):
            # loglik plateaus before the score does; keep going until the
            # stationarity check clears or the budget runs out
            g_loading, g_uniq = loglik_gradient(T, loading, uniq)
            grad_max = float(max(np.max(np.abs(g_loading)), np.max(np.abs(g_uniq))))
            if grad_max <= GRADIENT_TOL:
                loglik_converged = True
                break

    if not np.isfinite(grad_max):
        g_loading, g_uniq = loglik_gradient(T, loading, uniq)
        grad_max = float(max(np.max(np.abs(g_loading)), np.max(np.abs(g_uniq))))
    loading, rot_warn = fix_rotation(loading, uniq)
    # loglik and gradient are quoted at the normalized scale; parameters are not
    return FactorFit(
        loading=loading * scale,
        uniqueness=uniq * scale**2,
        t=t,
        loglik=float(path[-1]),
        iterations=it,
        converged=bool(loglik_converged),
        grad_max=grad_max,
        loglik_path=np.asarray(path),
        rotation_warning=rot_warn,
    )


def fix_rotation(loading: np.ndarray, uniq: np.ndarray) -> tuple[np.ndarray, bool]:
    """Rotate loadings so ``G' diag(u)^-1 G`` is diagonal with decreasing entries.

    Sign convention: in each column the entry of largest absolute value is
    positive (ties broken by lowest row index).  Returns the rotated matrix
    and a flag that is True when nearly equal eigenvalues (relative gap
    below 1e-10) make the rotation non-unique.
    """
    loading = np.asarray(loading, dtype=float)
    uniq = np.asarray(uniq, dtype=float)
    W = loading.T @ (loading / uniq[:, None])
    evals, evecs = np.linalg.eigh(W)
    if np.linalg.matrix_rank(W) < W.shape[0]:
        raise np.linalg.LinAlgError("G' inv(diag(u)) G is singular; rotation undefined")
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    warn = False
    scale = max(abs(evals[0]), 1e-300)
    if len(evals) > 1 and np.min(np.abs(np.diff(evals))) < 1e-10 * scale:
        warn = True
        warnings.warn(
            "rotation fix is not unique: nearly equal diagonal entries", RuntimeWarning
        )
    rotated = loading @ evecs
    for col in range(rotated.shape[1]):
        i_max = int(np.argmax(np.abs(rotated[:, col])))  # argmax takes the lowest index on ties
        if rotated[i_max, col] < 0:
            rotated[:, col] = -rotated[:, col]
    return rotated, warn


class ConditionIResult(NamedTuple):
    holds: bool
    certificate: list[tuple[int, tuple[int, ...], tuple[int, ...]]]
    counterexample: int | None
    inconclusive: bool


def _numerical_rank(mat: np.ndarray, tol: float) -> int:
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    return int(np.sum(s > tol))


def check_condition_i(loading: np.ndarray, zero_tol: float = 1e-8) -> ConditionIResult:
    """Check that deleting any loading row leaves two disjoint full-rank blocks.

    For a one-factor model this reduces to the closed form "at least three
    rows are nonzero".  Otherwise, for each deleted row, the search looks
    for a size-t row subset of full rank whose complement also has rank t;
    such a subset exists iff two disjoint full-column-rank submatrices do.
    The search is exhaustive for p <= 20 or t <= 2 and falls back to a
    greedy pivot heuristic (with an explicit inconclusive verdict) beyond
    that.

    Entries with absolute value below ``zero_tol`` are treated as structural
    zeros; numerical ranks use tolerance ``zero_tol * ||loading||``.
    """
    G = np.asarray(loading, dtype=float).copy()
    if G.ndim == 1:
        G = G[:, None]
    G[np.abs(G) < zero_tol] = 0.0
    p, t = G.shape
    rank_tol = zero_tol * max(np.linalg.norm(G), 1.0)

    if t == 1:
        nonzero = [int(i) for i in np.flatnonzero(np.any(G != 0.0, axis=1))]
        if len(nonzero) >= 3:
            cert = []
            for drop in range(p):
                rest = [i for i in nonzero if i != drop]
                cert.append((drop, (rest[0],), tuple(rest[1:])))
            return ConditionIResult(True, cert, None, False)
        # deleting any nonzero row (or any row at all, if none) breaks it
        failing = nonzero[0] if nonzero else 0
        return ConditionIResult(False, [], failing, False)

    exhaustive = p <= 20 or t <= 2
    certificate = []
    for drop in range(p):
        rows = [i for i in range(p) if i != drop]
        found = None
        if exhaustive:
            for subset in itertools.combinations(rows, t):
                sub = np.array(subset)
                if _numerical_rank(G[sub], rank_tol) < t:
                    continue
                rest = np.array([i for i in rows if i not in subset])
                if _numerical_rank(G[rest], rank_tol) == t:
                    found = (drop, tuple(subset), tuple(rest))
                    break
            if found is None:
                return ConditionIResult(False, [], drop, False)
        else:
            # greedy: peel off the t most independent rows by pivoted QR
            _, _, piv = _pivoted_qr(G[rows])
            subset = tuple(rows[i] for i in piv[:t])
            sub = np.array(subset)
            rest = np.array([i for i in rows if i not in subset])
            if (
                _numerical_rank(G[sub], rank_tol) == t
                and _numerical_rank(G[rest], rank_tol) == t
            ):
                found = (drop, subset, tuple(rest))
            else:
                return ConditionIResult(False, [], drop, True)
        certificate.append(found)
    return ConditionIResult(True, certificate, None, False)


def _pivoted_qr(mat: np.ndarray):
    from scipy.linalg import qr

    return qr(mat.T, pivoting=True, mode="economic")


class FactorCountSelection(NamedTuple):
    t: int
    ratios: NDArray[np.float64]
    low_confidence: bool


def select_num_factors(residuals: np.ndarray, t_max: int) -> FactorCountSelection:
    """Eigenvalue-ratio choice of the factor count.

    Returns the maximizer of ``mu_j / mu_{j+1}`` over j = 1..t_max for the
    eigenvalues of the residual second-moment matrix.  A flat statistic
    (no eigenvalue gap anywhere, as for an isotropic input) falls back to
    t = 1 with ``low_confidence=True``.  Deterministic given inputs.
    """
    residuals = np.asarray(residuals, dtype=float)
    p = residuals.shape[1]
    if t_max < 1 or t_max > (p - 1) // 2:
        raise ValidationError(f"t_max must lie in [1, (p-1)//2] = [1, {(p - 1) // 2}]")
    T = second_moment(residuals)
    evals = np.sort(np.linalg.eigvalsh(T))[::-1]
    evals = np.maximum(evals, 1e-300)
    ratios = evals[:t_max] / evals[1 : t_max + 1]
    t = int(np.argmax(ratios)) + 1
    low_confidence = bool(np.max(ratios) < 1.5)
    if low_confidence:
        t = 1
    return FactorCountSelection(t=t, ratios=ratios, low_confidence=low_confidence)
