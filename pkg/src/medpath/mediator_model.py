"""Mediator regression on treatment/covariate basis features.

Fits each mediator on a shared basis expansion by least squares (the
first estimation stage), exposes the residual matrix consumed by the
factor analysis, and tests the per-mediator treatment contrast.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .core_types import Dataset, ValidationError

# simple term kinds; "custom" looks up a vectorized transform in the registry
TERM_KINDS = (
    "constant",
    "treatment",
    "covariate",
    "covariate_square",
    "covariate_exp",
    "treatment_covariate_interaction",
    "custom",
)

_CUSTOM_TERMS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {}


def register_custom_term(name: str, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> None:
    """Register a vectorized custom basis transform ``fn(z, x) -> (n,) column``."""
    _CUSTOM_TERMS[name] = fn


@dataclass(frozen=True)
class BasisTerm:
    kind: str
    index: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValidationError(f"unknown basis term kind {self.kind!r}")
        if self.kind == "custom" and not self.name:
            raise ValidationError("custom basis term needs a registered name")

    def label(self) -> str:
        if self.kind == "constant":
            return "1"
        if self.kind == "treatment":
            return "Z"
        if self.kind == "custom":
            return f"custom:{self.name}"
        base = {
            "covariate": "X{0}",
            "covariate_square": "X{0}^2",
            "covariate_exp": "exp(X{0})",
            "treatment_covariate_interaction": "Z*X{0}",
        }[self.kind]
        return base.format(self.index)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered list of feature descriptors generating the mediator design."""

    terms: tuple[BasisTerm, ...]

    def __post_init__(self):
        terms = tuple(
            t if isinstance(t, BasisTerm) else BasisTerm(**t) for t in self.terms
        )
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ValidationError("basis term list must be non-empty")
        n_const = sum(t.kind == "constant" for t in terms)
        if n_const != 1:
            raise ValidationError(f"basis must contain the constant term exactly once, got {n_const}")

    @property
    def k(self) -> int:
        return len(self.terms)

    def treatment_term_index(self) -> int | None:
        """Position of the plain linear-treatment term, if present."""
        for i, t in enumerate(self.terms):
            if t.kind == "treatment":
                return i
        return None

    def has_treatment_nonlinearity(self) -> bool:
        """True when the treatment enters through anything but the plain linear term."""
        return any(
            t.kind in ("treatment_covariate_interaction", "custom") for t in self.terms
        )

    def to_config(self) -> list[dict]:
        out = []
        for t in self.terms:
            entry: dict = {"kind": t.kind}
            if t.index is not None:
                entry["index"] = t.index
            if t.name is not None:
                entry["name"] = t.name
            out.append(entry)
        return out

    @classmethod
    def from_config(cls, entries: list[dict]) -> "BasisSpec":
        return cls(terms=tuple(BasisTerm(**e) for e in entries))


def default_basis(q: int) -> BasisSpec:
    """Constant + treatment + all covariates, linear."""
    terms = [BasisTerm("constant"), BasisTerm("treatment")]
    terms += [BasisTerm("covariate", index=i) for i in range(q)]
    return BasisSpec(terms=tuple(terms))


def build_design(d: Dataset, spec: BasisSpec) -> np.ndarray:
    """Materialize the (n, k) basis matrix; column order follows ``spec.terms``."""
    cols = []
    for term in spec.terms:
        if term.kind in ("covariate", "covariate_square", "covariate_exp",
                         "treatment_covariate_interaction"):
            if term.index is None or not (0 <= term.index < d.q):
                raise ValidationError(
                    f"basis term {term.label()!r}: covariate index {term.index} out of range for q={d.q}"
                )
        if term.kind == "constant":
            cols.append(np.ones(d.n))
        elif term.kind == "treatment":
            cols.append(d.z)
        elif term.kind == "covariate":
            cols.append(d.x[:, term.index])
        elif term.kind == "covariate_square":
            cols.append(d.x[:, term.index] ** 2)
        elif term.kind == "covariate_exp":
            cols.append(np.exp(d.x[:, term.index]))
        elif term.kind == "treatment_covariate_interaction":
            cols.append(d.z * d.x[:, term.index])
        else:  # custom
            if term.name not in _CUSTOM_TERMS:
                raise ValidationError(f"custom basis term {term.name!r} is not registered")
            cols.append(np.asarray(_CUSTOM_TERMS[term.name](d.z, d.x), dtype=float))
    return np.column_stack(cols)


def basis_row(spec: BasisSpec, z: float, x_rows: np.ndarray) -> np.ndarray:
    """Basis features at a fixed treatment level, over the given covariate rows.

    Returns an (n_rows, k) matrix used by contrast averaging.
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    zvec = np.full(x_rows.shape[0], float(z))
    fake = Dataset(
        y=np.zeros(x_rows.shape[0]), z=zvec, m=np.zeros((x_rows.shape[0], 1)), x=x_rows
    )
    return build_design(fake, spec)


@dataclass(frozen=True)
class MediatorFit:
    """Per-mediator least squares results on a shared basis design.

    ``gamma_hat`` is (p, k); ``residuals`` is the (n, p) matrix of mediator
    residuals; ``gamma_cov`` stacks the heteroskedasticity-robust covariance
    of each mediator's coefficient vector as a (p, k, k) array.
    """

    gamma_hat: NDArray[np.float64]
    residuals: NDArray[np.float64]
    gamma_cov: NDArray[np.float64]
    basis: BasisSpec
    design: NDArray[np.float64]

    @property
    def p(self) -> int:
        return self.gamma_hat.shape[0]

    @property
    def k(self) -> int:
        return self.gamma_hat.shape[1]


def fit_mediator_model(d: Dataset, spec: BasisSpec) -> MediatorFit:
    """Least-squares fit of every mediator on the basis design.

    The basis is linear in the coefficients, so minimizing the mean squared
    residual norm decouples into p ordinary least-squares problems sharing
    one design matrix.  Residual columns are orthogonal to every basis
    column by construction.  Coefficient covariances use the sandwich form
    (B'B)^-1 (B' diag(e_j^2) B) (B'B)^-1 per mediator.

    Raises
    ------
    ValidationError
        If the design is rank deficient (condition number above 1e10).
    """
    B = build_design(d, spec)
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > 1e10:
        raise ValidationError(
            f"mediator design is rank-deficient: condition number {cond:.3e} exceeds 1e10"
        )
    # QR keeps the residual orthogonality tight even for skewed bases
    Q, R = np.linalg.qr(B)
    gamma = np.linalg.solve(R, Q.T @ d.m).T  # (p, k)
    resid = d.m - B @ gamma.T
    BtB_inv = np.linalg.inv(R.T @ R)
    k = B.shape[1]
    cov = np.empty((d.p, k, k))
    for j in range(d.p):
        meat = (B * (resid[:, j] ** 2)[:, None]).T @ B
        cov_j = BtB_inv @ meat @ BtB_inv
        cov[j] = 0.5 * (cov_j + cov_j.T)
    return MediatorFit(gamma_hat=gamma, residuals=resid, gamma_cov=cov, basis=spec, design=B)


def lambda_hat(
    fit: MediatorFit,
    j: int,
    z: float,
    z_prime: float,
    x_sample: np.ndarray,
) -> tuple[float, float]:
    """Treatment contrast on mediator j, averaged over the covariate sample.

    Returns the estimate ``mean_x[g_j(z, x) - g_j(z', x)]`` and its delta
    method standard error (covariate rows treated as fixed).
    """
    if not (0 <= j < fit.p):
        raise IndexError(f"mediator index {j} out of range for p={fit.p}")
    diff = basis_row(fit.basis, z, x_sample) - basis_row(fit.basis, z_prime, x_sample)
    dbar = diff.mean(axis=0)
    est = float(dbar @ fit.gamma_hat[j])
    se = float(np.sqrt(max(dbar @ fit.gamma_cov[j] @ dbar, 0.0)))
    return est, se


def test_lambda(
    fit: MediatorFit,
    j: int,
    z: float,
    z_prime: float,
    x_sample: np.ndarray,
) -> float:
    """Two-sided normal p-value for the null of a zero treatment contrast."""
    est, se = lambda_hat(fit, j, z, z_prime, x_sample)
    if se == 0.0:
        if est == 0.0:
            return 1.0
        warnings.warn(
            f"mediator {j}: zero standard error with nonzero contrast; p-value forced to 0",
            RuntimeWarning,
        )
        return 0.0
    return float(2.0 * stats.norm.sf(abs(est / se)))
