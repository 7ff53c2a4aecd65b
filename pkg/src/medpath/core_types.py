"""Shared data model, validation, and standardization utilities.

Conventions used throughout the package:

* sample moments use the averaging operator ``mean`` with denominator ``n``
  (population convention), so standardization commutes with sample averages;
* data containers are immutable after construction and safe to share across
  workers; every operation on them is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its iteration budget."""


class IdentificationError(RuntimeError):
    """Raised when a fit cannot proceed because identification fails."""


def _as_float_array(a, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Observed sample: outcome, treatment, mediators, covariates.

    Attributes
    ----------
    y : (n,) outcome vector.
    z : (n,) treatment vector (binary or continuous).
    m : (n, p) mediator matrix.
    x : (n, q) covariate matrix; q may be 0.
    row_ids : optional row labels.
    mediator_names : optional mediator labels (length p).
    """

    y: NDArray[np.float64]
    z: NDArray[np.float64]
    m: NDArray[np.float64]
    x: NDArray[np.float64]
    row_ids: tuple[str, ...] | None = None
    mediator_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", _as_float_array(self.y, 1, "y"))
        object.__setattr__(self, "z", _as_float_array(self.z, 1, "z"))
        object.__setattr__(self, "m", _as_float_array(self.m, 2, "m"))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", _as_float_array(x, 2, "x"))
        if self.row_ids is not None:
            object.__setattr__(self, "row_ids", tuple(str(r) for r in self.row_ids))
        if self.mediator_names is not None:
            object.__setattr__(self, "mediator_names", tuple(str(s) for s in self.mediator_names))
        for name in ("y", "z", "m", "x"):
            getattr(self, name).setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.m.shape[1]

    @property
    def q(self) -> int:
        return self.x.shape[1]

    def mediator_name(self, j: int) -> str:
        if self.mediator_names is not None:
            return self.mediator_names[j]
        return f"M{j + 1}"


def validate_dataset(d: Dataset) -> list[str]:
    """Check every :class:`Dataset` invariant; return a list of violations.

    Diagnostic only: never raises, and an empty list means the dataset is
    valid.  Each violation names the offending rows/columns.
    """
    out: list[str] = []
    n = d.y.shape[0]
    if n < 1:
        out.append("row count violation: need n >= 1")
    if d.m.shape[1] < 1:
        out.append("shape violation: need at least one mediator column (p >= 1)")
    for name, arr in (("z", d.z), ("m", d.m), ("x", d.x)):
        if arr.shape[0] != n:
            out.append(
                f"row count violation: {name} has {arr.shape[0]} rows, y has {n}"
            )
    if d.row_ids is not None and len(d.row_ids) != n:
        out.append(f"row count violation: row_ids has {len(d.row_ids)} entries, y has {n}")
    if d.mediator_names is not None and len(d.mediator_names) != d.m.shape[1]:
        out.append(
            "shape violation: mediator_names has "
            f"{len(d.mediator_names)} entries, m has {d.m.shape[1]} columns"
        )
    for i in np.flatnonzero(~np.isfinite(d.y)):
        out.append(f"non-finite value in y[{i}]")
    for i in np.flatnonzero(~np.isfinite(d.z)):
        out.append(f"non-finite value in z[{i}]")
    for i, j in zip(*np.nonzero(~np.isfinite(d.m))):
        out.append(f"non-finite value in m[{i},{j}] (row {i}, mediator {j})")
    for i, j in zip(*np.nonzero(~np.isfinite(d.x))):
        out.append(f"non-finite value in x[{i},{j}] (row {i}, covariate {j})")
    return out


def column_scales(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population standard deviation (denominator n)."""
    mat = np.asarray(mat, dtype=float)
    means = mat.mean(axis=0)
    scales = np.sqrt(np.mean((mat - means) ** 2, axis=0))
    return means, scales


def standardize_columns(mat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale each column to mean 0 and population sd 1.

    Returns
    -------
    (standardized, means, scales) such that
    ``standardized * scales + means`` reproduces the input exactly.

    Raises
    ------
    ValidationError
        If some column is constant (zero variance); the message names the
        first offending column.
    """
    mat = _as_float_array(mat, 2, "mat")
    means, scales = column_scales(mat)
    bad = np.flatnonzero(scales <= 0)
    if bad.size:
        raise ValidationError(f"constant column {bad[0]}")
    return (mat - means) / scales, means, scales


@dataclass(frozen=True)
class ParameterVectorNu:
    """Stacked first-stage parameters: mediator coefficients, loadings, uniquenesses.

    ``gamma`` is the flattened (p, k) mediator-basis coefficient matrix in
    row-major order; ``loading`` is (p, t); ``uniqueness`` holds the diagonal
    of the mediator noise covariance.  The packed vector layout is
    ``[gamma, loading (row-major), uniqueness]``; the trailing
    ``p*t + p`` entries form the factor-parameter sub-slice.
    """

    gamma: NDArray[np.float64]
    gamma_layout: tuple[int, int]
    loading: NDArray[np.float64]
    uniqueness: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "gamma", _as_float_array(self.gamma, 1, "gamma"))
        object.__setattr__(self, "loading", _as_float_array(self.loading, 2, "loading"))
        object.__setattr__(self, "uniqueness", _as_float_array(self.uniqueness, 1, "uniqueness"))
        p, k = self.gamma_layout
        if self.gamma.shape[0] != p * k:
            raise ValidationError(
                f"gamma has {self.gamma.shape[0]} entries, layout {self.gamma_layout} needs {p * k}"
            )
        if self.loading.shape[0] != p or self.uniqueness.shape[0] != p:
            raise ValidationError("loading/uniqueness row count inconsistent with gamma_layout")
        if np.any(self.uniqueness <= 0):
            raise ValidationError("uniqueness entries must be strictly positive")

    @property
    def p(self) -> int:
        return self.gamma_layout[0]

    @property
    def k(self) -> int:
        return self.gamma_layout[1]

    @property
    def t(self) -> int:
        return self.loading.shape[1]

    @property
    def gamma_matrix(self) -> np.ndarray:
        return self.gamma.reshape(self.gamma_layout)

    def pack(self) -> np.ndarray:
        """Full parameter vector [gamma, vec(loading), uniqueness]."""
        return np.concatenate([self.gamma, self.loading.ravel(), self.uniqueness])

    def alpha(self) -> np.ndarray:
        """Factor-parameter sub-slice [vec(loading), uniqueness]."""
        return np.concatenate([self.loading.ravel(), self.uniqueness])

    @classmethod
    def unpack(cls, vec: np.ndarray, p: int, k: int, t: int) -> "ParameterVectorNu":
        vec = np.asarray(vec, dtype=float)
        if vec.shape[0] != p * k + p * t + p:
            raise ValidationError(f"packed vector has wrong length {vec.shape[0]}")
        gamma = vec[: p * k]
        loading = vec[p * k : p * k + p * t].reshape(p, t)
        uniq = vec[p * k + p * t :]
        return cls(gamma=gamma, gamma_layout=(p, k), loading=loading, uniqueness=uniq)


@dataclass(frozen=True)
class OutcomeParams:
    """Outcome-model coefficients (intercept, treatment, mediators, covariates, proxy)."""

    beta0: float
    beta1: float
    beta2: NDArray[np.float64]
    beta3: NDArray[np.float64]
    phi: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "beta2", _as_float_array(self.beta2, 1, "beta2"))
        object.__setattr__(self, "beta3", _as_float_array(self.beta3, 1, "beta3"))
        object.__setattr__(self, "phi", _as_float_array(self.phi, 1, "phi"))

    def flatten(self) -> np.ndarray:
        """Coefficients in design order (1, Z, M, X, L)."""
        return np.concatenate([[self.beta0, self.beta1], self.beta2, self.beta3, self.phi])

    @classmethod
    def from_flat(cls, xi: np.ndarray, p: int, q: int, t: int) -> "OutcomeParams":
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] != 2 + p + q + t:
            raise ValidationError(f"flattened coefficient vector has wrong length {xi.shape[0]}")
        return cls(
            beta0=float(xi[0]),
            beta1=float(xi[1]),
            beta2=xi[2 : 2 + p],
            beta3=xi[2 + p : 2 + p + q],
            phi=xi[2 + p + q :],
        )
