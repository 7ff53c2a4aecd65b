"""Sandwich covariance, direct/indirect effect tests, and pathway selection.

The covariance of the outcome coefficients must account for the proxy
being estimated.  Writing the stacked first-stage estimating equations as
``mean(Q(S; nu)) = 0`` over the parameter vector ``nu`` (mediator
coefficients, loadings, uniquenesses), the per-observation influence
contribution is

    K_i = A @ inv(B) @ Q_i + R_i * psi_i,

with ``A = mean(R_i d(phi'L_i)/dnu')`` and ``B = d mean(Q)/d nu``, and the
coefficient covariance is ``inv(C) mean(K K') inv(C)`` restricted to the
retained coordinates.  ``A`` and ``B`` use central finite differences with
step ``eps^(1/3) * max(1, |coordinate|)``; the Jacobian evaluation caches
algebraically invariant pieces (the residual second-moment update under a
single-coefficient perturbation is rank-two) so the differences are exact
up to float roundoff while staying cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from ._linalg import FactoredInverse, woodbury_delta
from .core_types import Dataset, ParameterVectorNu, ValidationError
from .factor_model import FactorFit
from .mediator_model import BasisSpec, MediatorFit, build_design, lambda_hat, test_lambda
from .penalized import OutcomeFit
from .proxy import design_matrix

FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)

CORRECTION_METHODS = ("bonferroni", "holm", "hochberg", "hommel", "bh")


# ---------------------------------------------------------------------------
# estimating-function machinery


def _diag_inverse(fi: FactoredInverse) -> np.ndarray:
    return 1.0 / fi.uniq - np.sum(fi.F * fi.H, axis=1)


class QModel:
    """Vectorized evaluation of the stacked estimating function.

    The function stacks (a) the mediator-regression normal equations,
    whose sample mean is linear in the coefficients, and (b) the gradient
    of the factor quasi-likelihood objective in (loading, uniqueness).
    Coordinates follow :meth:`ParameterVectorNu.pack`.
    """

    def __init__(self, m: np.ndarray, basis_matrix: np.ndarray):
        self.M = np.asarray(m, dtype=float)
        self.B = np.asarray(basis_matrix, dtype=float)
        self.n, self.p = self.M.shape
        self.k = self.B.shape[1]
        self.BtB_n = self.B.T @ self.B / self.n
        self.MtB_n = self.M.T @ self.B / self.n

    def dim(self, t: int) -> int:
        return self.p * self.k + self.p * t + self.p

    def residuals(self, nu: ParameterVectorNu) -> np.ndarray:
        return self.M - self.B @ nu.gamma_matrix.T

    def second_moment(self, nu: ParameterVectorNu) -> np.ndarray:
        resid = self.residuals(nu)
        return resid.T @ resid / self.n

    def _alpha_blocks(self, T: np.ndarray, loading: np.ndarray,
                      uniq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fi = FactoredInverse(loading, uniq)
        q_load = 2.0 * (fi.solve(loading) - fi.quad_apply(T, loading))
        q_uniq = _diag_inverse(fi) - fi.quad_diag(T)
        return q_load, q_uniq

    def qbar(self, nu: ParameterVectorNu) -> np.ndarray:
        """Sample mean of the estimating function at ``nu``."""
        q_gamma = self.MtB_n - nu.gamma_matrix @ self.BtB_n
        T = self.second_moment(nu)
        q_load, q_uniq = self._alpha_blocks(T, nu.loading, nu.uniqueness)
        return np.concatenate([q_gamma.ravel(), q_load.ravel(), q_uniq])

    def q_per_obs(self, nu: ParameterVectorNu) -> np.ndarray:
        """Per-observation estimating-function values, (n, dim)."""
        resid = self.residuals(nu)
        q_gamma = (resid[:, :, None] * self.B[:, None, :]).reshape(self.n, -1)
        fi = FactoredInverse(nu.loading, nu.uniqueness)
        W = fi.solve(resid.T).T                    # resid @ inv(S)
        SinvG = fi.solve(nu.loading)
        WG = W @ nu.loading
        q_load = 2.0 * (SinvG[None, :, :] - W[:, :, None] * WG[:, None, :])
        q_uniq = _diag_inverse(fi)[None, :] - W**2
        return np.concatenate(
            [q_gamma, q_load.reshape(self.n, -1), q_uniq], axis=1
        )

    # -- Jacobian ----------------------------------------------------------

    def jacobian_fd(self, nu: ParameterVectorNu, structured: bool = True) -> np.ndarray:
        """Central-difference Jacobian of ``qbar`` with per-coordinate steps."""
        if not structured:
            return self._jacobian_naive(nu)
        return self._jacobian_structured(nu)

    def _jacobian_naive(self, nu: ParameterVectorNu) -> np.ndarray:
        base = nu.pack()
        d = base.shape[0]
        J = np.empty((d, d))
        h = FD_STEP * np.maximum(1.0, np.abs(base))
        for c in range(d):
            up = base.copy()
            dn = base.copy()
            up[c] += h[c]
            dn[c] -= h[c]
            J[:, c] = (
                self.qbar(ParameterVectorNu.unpack(up, self.p, self.k, nu.t))
                - self.qbar(ParameterVectorNu.unpack(dn, self.p, self.k, nu.t))
            ) / (2.0 * h[c])
        return J

    def _jacobian_structured(self, nu: ParameterVectorNu) -> np.ndarray:
        """Same central differences, with invariants cached.

        Gamma perturbations change the residual second moment by a rank-two
        symmetric update and leave the factor parameters fixed; factor
        perturbations leave the residuals fixed.  Both facts are used to
        avoid recomputing n x p products per coordinate.
        """
        p, k, t = self.p, self.k, nu.t
        d = self.dim(t)
        base = nu.pack()
        h = FD_STEP * np.maximum(1.0, np.abs(base))
        J = np.zeros((d, d))
        resid = self.residuals(nu)
        T = self.second_moment(nu)
        Qc = resid.T @ self.B / self.n             # (p, k): mean resid_j * B_l
        fi = FactoredInverse(nu.loading, nu.uniqueness)
        Sinv = fi.dense()
        SinvG = fi.solve(nu.loading)
        n_gamma = p * k

        # gamma coordinates: c = j*k + l.  The mean estimating function is
        # quadratic in gamma (through the residual second moment), so the
        # central difference collapses to the exact derivative: the +h and
        # -h rank-two second-moment updates differ only in their linear
        # term, and the h^2 diagonal term cancels.
        Uq = Sinv @ Qc                             # (p, k): inv(S) q_l columns
        gq = Qc.T @ SinvG                          # (k, t): q_l' inv(S) G
        for j in range(p):
            a_j = Sinv[:, j]
            for l in range(k):
                c = j * k + l
                # q_gamma block: mean is linear in gamma, row j only
                J[j * k : (j + 1) * k, c] = -self.BtB_n[l]
                u = Uq[:, l]
                J[n_gamma : n_gamma + p * t, c] = (
                    2.0 * (np.outer(a_j, gq[l]) + np.outer(u, SinvG[j]))
                ).ravel()
                J[n_gamma + p * t :, c] = 2.0 * a_j * u

        # factor coordinates: full alpha-block re-evaluation, residuals fixed
        for c in range(n_gamma, d):
            hc = h[c]
            up = base.copy()
            dn = base.copy()
            up[c] += hc
            dn[c] -= hc
            nu_up = ParameterVectorNu.unpack(up, p, k, t)
            nu_dn = ParameterVectorNu.unpack(dn, p, k, t)
            ql_up, qu_up = self._alpha_blocks(T, nu_up.loading, nu_up.uniqueness)
            ql_dn, qu_dn = self._alpha_blocks(T, nu_dn.loading, nu_dn.uniqueness)
            J[n_gamma : n_gamma + p * t, c] = (ql_up - ql_dn).ravel() / (2.0 * hc)
            J[n_gamma + p * t :, c] = (qu_up - qu_dn) / (2.0 * hc)
        return J


def evaluate_q(z: float, m_row: np.ndarray, x_row: np.ndarray,
               nu: ParameterVectorNu, basis: BasisSpec) -> np.ndarray:
    """Estimating-function value for a single observation."""
    m_row = np.atleast_1d(np.asarray(m_row, dtype=float))
    x_row = np.atleast_1d(np.asarray(x_row, dtype=float))
    d = Dataset(y=np.zeros(1), z=np.array([float(z)]), m=m_row[None, :], x=x_row[None, :])
    B = build_design(d, basis)
    model = QModel(d.m, B)
    return model.q_per_obs(nu)[0]


class ProxyModel:
    """Proxy values as a function of the first-stage parameters (data fixed)."""

    def __init__(self, m: np.ndarray, basis_matrix: np.ndarray):
        self.M = np.asarray(m, dtype=float)
        self.B = np.asarray(basis_matrix, dtype=float)
        self.n, self.p = self.M.shape
        self.k = self.B.shape[1]

    def proxy(self, nu: ParameterVectorNu) -> np.ndarray:
        resid = self.M - self.B @ nu.gamma_matrix.T
        return resid @ woodbury_delta(nu.loading, nu.uniqueness)

    def weighted_jacobian(self, nu: ParameterVectorNu, phi: np.ndarray,
                          R: np.ndarray) -> np.ndarray:
        """``mean(R_i d(phi'L_i)/dnu')`` by central differences, (dim R, dim nu).

        Gamma perturbations shift the proxy by a rank-one update of the
        cached residuals; factor perturbations reuse the residuals and only
        rebuild the projection matrix.
        """
        p, k, t = self.p, self.k, nu.t
        phi = np.asarray(phi, dtype=float)
        base = nu.pack()
        h = FD_STEP * np.maximum(1.0, np.abs(base))
        d_nu = base.shape[0]
        A = np.empty((R.shape[1], d_nu))
        n_gamma = p * k
        resid = self.M - self.B @ nu.gamma_matrix.T
        delta = woodbury_delta(nu.loading, nu.uniqueness)
        delta_phi = delta @ phi                       # (p,)
        Rt_B = R.T @ self.B / self.n                  # (dimR, k)
        for j in range(p):
            for l in range(k):
                # d(phi'L_i)/dgamma_jl = -B_il * (delta[j] . phi); exact, and the
                # central difference of a linear map equals the derivative
                A[:, j * k + l] = -delta_phi[j] * Rt_B[:, l]
        for c in range(n_gamma, d_nu):
            hc = h[c]
            up = base.copy()
            dn = base.copy()
            up[c] += hc
            dn[c] -= hc
            nu_up = ParameterVectorNu.unpack(up, p, k, t)
            nu_dn = ParameterVectorNu.unpack(dn, p, k, t)
            d_up = woodbury_delta(nu_up.loading, nu_up.uniqueness)
            d_dn = woodbury_delta(nu_dn.loading, nu_dn.uniqueness)
            dL_phi = resid @ ((d_up - d_dn) @ phi) / (2.0 * hc)
            A[:, c] = R.T @ dL_phi / self.n
        return A


# ---------------------------------------------------------------------------
# sandwich covariance


@dataclass(frozen=True)
class SandwichResult:
    """Covariance of the retained outcome coefficients, with plumbing."""

    sigma_ad: NDArray[np.float64]
    index_map: NDArray[np.int64]
    c_tilde: NDArray[np.float64]
    k_outer: NDArray[np.float64]
    n: int

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma_ad) / self.n)

    def position_of(self, model_coord: int) -> int:
        pos = np.flatnonzero(self.index_map == model_coord)
        if pos.size == 0:
            raise KeyError(f"model coordinate {model_coord} not in the retained set")
        return int(pos[0])

    def se_of(self, model_coord: int) -> float:
        return float(self.se()[self.position_of(model_coord)])


def retained_indices(active_set: np.ndarray, p: int, q: int, t: int) -> np.ndarray:
    """Model coordinates kept for inference: intercept, treatment, active
    mediators, covariates, proxy components."""
    idx = [0, 1]
    idx += [2 + int(j) for j in np.sort(np.asarray(active_set, dtype=int))]
    idx += list(range(2 + p, 2 + p + q + t))
    return np.asarray(idx, dtype=np.int64)


def estimate_sandwich(d: Dataset, mediator_fit: MediatorFit, factor_fit: FactorFit,
                      proxy: np.ndarray, outcome_fit: OutcomeFit,
                      full_index_set: bool = False) -> SandwichResult:
    """Plug-in sandwich covariance accounting for proxy estimation.

    With ``full_index_set=True`` every coordinate is retained (the
    initial-fit covariance); otherwise the retained set keeps the active
    mediators only (the post-selection covariance).  Standard errors are
    ``sqrt(diag / n)``.
    """
    proxy = np.asarray(proxy, dtype=float)
    if proxy.ndim == 1:
        proxy = proxy[:, None]
    p, q, t = d.p, d.q, proxy.shape[1]
    if t < 1:
        raise ValidationError("sandwich estimation needs at least one proxy column")
    R = design_matrix(d, proxy)
    if full_index_set:
        idx = np.arange(R.shape[1], dtype=np.int64)
    else:
        idx = retained_indices(outcome_fit.active_set, p, q, t)
    if idx.size > d.n:
        raise ValidationError("retained coordinate count exceeds the sample size")
    R_sub = R[:, idx]
    C = R_sub.T @ R_sub / d.n
    cond = np.linalg.cond(C)
    if cond > 1e12:
        raise ValidationError(
            f"design second-moment matrix is near-singular (condition number {cond:.3e}); "
            "identification condition (ii) appears to fail"
        )

    nu = ParameterVectorNu(
        gamma=mediator_fit.gamma_hat.ravel(),
        gamma_layout=(p, mediator_fit.k),
        loading=factor_fit.loading,
        uniqueness=factor_fit.uniqueness,
    )
    qmodel = QModel(d.m, mediator_fit.design)
    lmodel = ProxyModel(d.m, mediator_fit.design)

    B = qmodel.jacobian_fd(nu)
    A = lmodel.weighted_jacobian(nu, outcome_fit.params.phi, R)
    Q = qmodel.q_per_obs(nu)

    # A @ inv(B): least-squares solve; B is singular along rotation
    # directions when t >= 2, where the pseudo-inverse drops exactly the
    # flat directions and leaves the identified blocks unchanged
    try:
        G = np.linalg.solve(B.T, A.T).T
        if not np.all(np.isfinite(G)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        G = A @ np.linalg.pinv(B, rcond=1e-10)
    psi = outcome_fit.residuals
    K = Q @ G.T + R * psi[:, None]
    K_sub = K[:, idx]
    k_outer = K_sub.T @ K_sub / d.n
    C_inv = np.linalg.inv(C)
    sigma = C_inv @ k_outer @ C_inv
    sigma = 0.5 * (sigma + sigma.T)
    return SandwichResult(sigma_ad=sigma, index_map=idx, c_tilde=C, k_outer=k_outer, n=d.n)


# ---------------------------------------------------------------------------
# effects


def test_nde(outcome_fit: OutcomeFit, sandwich: SandwichResult,
             z: float, z_prime: float) -> dict:
    """Natural direct effect estimate, standard error, and two-sided p-value."""
    contrast = float(z) - float(z_prime)
    se1 = sandwich.se_of(1)
    est = outcome_fit.params.beta1 * contrast
    se = abs(contrast) * se1
    if contrast == 0.0:
        return {"estimate": 0.0, "se": 0.0, "p_value": 1.0}
    zscore = est / se if se > 0 else np.inf * np.sign(est) if est != 0 else 0.0
    p = float(2.0 * stats.norm.sf(abs(zscore))) if np.isfinite(zscore) else 0.0
    return {"estimate": float(est), "se": float(se), "p_value": p}


def estimate_nie(j: int, outcome_fit: OutcomeFit, mediator_fit: MediatorFit,
                 sandwich: SandwichResult, z: float, z_prime: float,
                 x_sample: np.ndarray | None = None) -> dict:
    """Indirect effect through mediator j: ``beta2_j * lambda_j``.

    The standard error treats the two factors as independent
    (product-method SE), which the report flags; ``x_sample`` defaults to
    the covariate rows cached on the mediator fit's design being
    unavailable, so callers pass the observed covariates.
    """
    if j not in set(int(i) for i in outcome_fit.active_set):
        raise ValidationError(f"mediator {j} is not in the active set")
    if x_sample is None:
        raise ValidationError("x_sample is required (pass the observed covariate rows)")
    lam, lam_se = lambda_hat(mediator_fit, j, z, z_prime, x_sample)
    b = float(outcome_fit.params.beta2[j])
    b_se = sandwich.se_of(2 + j)
    est = b * lam
    se = float(np.sqrt(b**2 * lam_se**2 + lam**2 * b_se**2))
    return {"estimate": float(est), "se": se, "beta2": b, "beta2_se": b_se,
            "lambda": lam, "lambda_se": lam_se}


# ---------------------------------------------------------------------------
# multiple-testing corrections


def adjust_pvalues(p: np.ndarray, method: str) -> np.ndarray:
    """Adjusted p-values for bonferroni / holm / hochberg / hommel / bh.

    Every output is clipped to [raw, 1] and respects the method's
    step-down/step-up monotonicity.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValidationError("p-values must form a 1-d vector")
    if p.size and (np.min(p) < 0.0 or np.max(p) > 1.0 or np.any(~np.isfinite(p))):
        raise ValidationError("p-values must lie in [0, 1]")
    if method not in CORRECTION_METHODS:
        raise ValidationError(f"unknown correction {method!r}; choose from {CORRECTION_METHODS}")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ps = p[order]
    ranks = np.arange(1, m + 1, dtype=float)

    if method == "bonferroni":
        adj = m * p
    elif method == "holm":
        stepdown = np.maximum.accumulate((m - ranks + 1) * ps)
        adj = _unsort(stepdown, order)
    elif method == "hochberg":
        stepup = np.minimum.accumulate(((m - ranks + 1) * ps)[::-1])[::-1]
        adj = _unsort(stepup, order)
    elif method == "bh":
        stepup = np.minimum.accumulate((m * ps / ranks)[::-1])[::-1]
        adj = _unsort(stepup, order)
    else:  # hommel (Wright's algorithm)
        adj = _unsort(_hommel_sorted(ps), order)
    return np.clip(adj, p, 1.0)


def _unsort(sorted_vals: np.ndarray, order: np.ndarray) -> np.ndarray:
    out = np.empty_like(sorted_vals)
    out[order] = sorted_vals
    return out


def _hommel_sorted(ps: np.ndarray) -> np.ndarray:
    n = ps.size
    if n == 1:
        return ps.copy()
    i = np.arange(1, n + 1, dtype=float)
    q = np.full(n, np.min(n * ps / i))
    pa = q.copy()
    for mm in range(n - 1, 1, -1):
        i1 = np.arange(n - mm + 1)
        i2 = np.arange(n - mm + 1, n)
        q1 = np.min(mm * ps[i2] / np.arange(2, mm + 1))
        q[i1] = np.minimum(mm * ps[i1], q1)
        q[i2] = q[n - mm]
        pa = np.maximum(pa, q)
    return np.maximum(pa, ps)


# ---------------------------------------------------------------------------
# two-step pathway selection


@dataclass(frozen=True)
class PathwayRow:
    index: int
    name: str
    beta2_hat: float
    lambda_hat: float
    nie_hat: float
    nie_se: float
    raw_p: float
    adjusted_p: float


@dataclass(frozen=True)
class SelectionReport:
    """Active-pathway selection results shaped like the per-mediator table."""

    nde: dict | None
    pathways: tuple[PathwayRow, ...]
    method: str
    alpha: float
    active_pathways: NDArray[np.int64]
    nie_se_note: str = "product-method SE (independence approximation)"

    def selected_indices(self) -> np.ndarray:
        return np.asarray([row.index for row in self.pathways], dtype=np.int64)


def select_active_pathways(outcome_fit: OutcomeFit, mediator_fit: MediatorFit,
                           method: str, alpha: float, z: float, z_prime: float,
                           x_sample: np.ndarray,
                           sandwich: SandwichResult | None = None,
                           mediator_names: tuple[str, ...] | None = None) -> SelectionReport:
    """Two-step selection: nonzero outcome coefficients, then contrast tests.

    Step 1 takes the active set of the penalized outcome fit; step 2 tests
    a zero treatment contrast for each selected mediator and applies the
    requested multiple-testing correction at level ``alpha`` across the
    selected hypotheses.  An empty active set yields a valid empty report.
    """
    if not (0.0 < alpha < 1.0):
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    selected = np.sort(np.asarray(outcome_fit.active_set, dtype=int))
    raw = np.array([
        test_lambda(mediator_fit, int(j), z, z_prime, x_sample) for j in selected
    ])
    adjusted = adjust_pvalues(raw, method) if selected.size else raw
    rows = []
    for pos, j in enumerate(selected):
        lam, lam_se = lambda_hat(mediator_fit, int(j), z, z_prime, x_sample)
        b = float(outcome_fit.params.beta2[j])
        if sandwich is not None:
            b_se = sandwich.se_of(2 + int(j))
            nie_se = float(np.sqrt(b**2 * lam_se**2 + lam**2 * b_se**2))
        else:
            nie_se = np.nan
        name = mediator_names[j] if mediator_names is not None else f"M{j + 1}"
        rows.append(PathwayRow(
            index=int(j), name=name, beta2_hat=b, lambda_hat=lam,
            nie_hat=b * lam, nie_se=nie_se, raw_p=float(raw[pos]),
            adjusted_p=float(adjusted[pos]),
        ))
    active = selected[adjusted <= alpha] if selected.size else selected
    return SelectionReport(
        nde=None,
        pathways=tuple(rows),
        method=method,
        alpha=float(alpha),
        active_pathways=np.asarray(active, dtype=np.int64),
    )
