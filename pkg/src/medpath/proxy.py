"""Projection proxy for the unmeasured confounder, plus identification checks.

The proxy is the linear projection of the latent confounder onto the
mediator residuals: ``L = D' Mres`` with ``D = (G G' + S_eps)^-1 G`` chosen
so the projection residual is uncorrelated with the mediator residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ._linalg import woodbury_delta
from .core_types import Dataset

# relative eigenvalue ratio for full-rank decisions (double-precision scale)
RANK_RTOL = 1e-10


def compute_delta(loading: np.ndarray, uniqueness: np.ndarray) -> np.ndarray:
    """Projection matrix ``(G G' + diag(u))^-1 G``, via the Woodbury form."""
    loading = np.asarray(loading, dtype=float)
    if loading.ndim == 1:
        loading = loading[:, None]
    uniqueness = np.asarray(uniqueness, dtype=float)
    return woodbury_delta(loading, uniqueness)


def compute_proxy(residuals: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Proxy matrix with row i equal to ``delta' @ residuals[i]``; shape (n, t)."""
    residuals = np.asarray(residuals, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if delta.ndim == 1:
        delta = delta[:, None]
    if residuals.shape[1] != delta.shape[0]:
        raise ValueError(
            f"residuals have {residuals.shape[1]} columns, delta has {delta.shape[0]} rows"
        )
    return residuals @ delta


def design_matrix(d: Dataset, proxy: np.ndarray) -> np.ndarray:
    """Outcome regression design (1, Z, M, X, L) as an (n, 2+p+q+t) matrix."""
    proxy = np.asarray(proxy, dtype=float)
    if proxy.ndim == 1:
        proxy = proxy[:, None]
    return np.column_stack([np.ones(d.n), d.z, d.m, d.x, proxy])


def check_condition_ii(d: Dataset, proxy: np.ndarray) -> dict:
    """Full-rank check of the design second-moment matrix.

    Forms ``H = mean(R R')`` for ``R = (1, Z, M', X', L')`` and reports its
    numerical rank, condition number, and whether the smallest eigenvalue
    clears ``1e-10`` times the largest.
    """
    R = design_matrix(d, proxy)
    H = R.T @ R / d.n
    evals = np.linalg.eigvalsh(H)
    largest = float(evals[-1])
    smallest = float(evals[0])
    rank = int(np.sum(evals > RANK_RTOL * max(largest, 1e-300)))
    cond = float(largest / smallest) if smallest > 0 else np.inf
    return {
        "rank": rank,
        "dim": H.shape[0],
        "condition_number": cond,
        "smallest_eigenvalue": smallest,
        "largest_eigenvalue": largest,
        "holds": bool(smallest > RANK_RTOL * largest),
    }


@dataclass(frozen=True)
class ProxyResult:
    """Projection matrix, proxy values, and the identification diagnostic."""

    delta: NDArray[np.float64]
    proxy: NDArray[np.float64]
    condition_ii: dict


def build_proxy(d: Dataset, residuals: np.ndarray, loading: np.ndarray,
                uniqueness: np.ndarray) -> ProxyResult:
    delta = compute_delta(loading, uniqueness)
    proxy = compute_proxy(residuals, delta)
    return ProxyResult(delta=delta, proxy=proxy, condition_ii=check_condition_ii(d, proxy))
