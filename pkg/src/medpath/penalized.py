"""Partially penalized lasso / adaptive lasso for the proxied outcome model.

The objective minimized, in original coordinates, is

    mean((Y - b0 - b1 Z - b2'M - b3'X - phi'L)^2) + (lam/n) * sum_r w_r |b2_r|

with only the mediator coefficients penalized.  Mediator columns are
centered and scaled internally (population sd); the column scales are
folded into the per-coordinate thresholds so the solution solves exactly
the objective above, and coefficients are reported on the original scale.

The cyclic coordinate-descent core lives in a compiled extension with a
pure-NumPy fallback chosen at import time.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .core_types import ConvergenceError, Dataset, OutcomeParams, ValidationError, standardize_columns

if os.environ.get("MEDPATH_PURE_PYTHON", "") == "1":
    from . import _cd_numpy as _kernel

    USING_COMPILED_KERNEL = False
else:
    try:
        from . import _cd_fast as _kernel  # type: ignore[attr-defined]

        USING_COMPILED_KERNEL = True
    except ImportError:  # pragma: no cover - depends on the build
        from . import _cd_numpy as _kernel

        USING_COMPILED_KERNEL = False


def solver_backend() -> str:
    return "compiled" if USING_COMPILED_KERNEL else "numpy"


CD_TOL = 1e-9
MAX_SWEEPS = 100_000
KKT_TOL = 1e-6
N_LAMBDA_DEFAULT = 100
LAMBDA_MIN_RATIO = 1e-4
DELTA_DEFAULT = 1.0


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty level, per-mediator weights, and adaptive exponent."""

    lam: float
    weights: NDArray[np.float64]
    delta: float = DELTA_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.lam < 0:
            raise ValidationError(f"penalty level must be >= 0, got {self.lam}")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValidationError("penalty weights must be finite and nonnegative")


@dataclass(frozen=True)
class OutcomeFit:
    """Solution of the partially penalized problem plus tuning records.

    ``cv_table`` holds (penalty, mean CV error, se) rows for CV-tuned fits
    and (penalty, BIC, 0) rows for BIC-tuned ones; ``tuning`` says which.
    """

    params: OutcomeParams
    active_set: NDArray[np.int64]
    residuals: NDArray[np.float64]
    lambda_used: float
    delta_used: float
    objective: float
    kkt_violation: float
    sweeps: int
    cv_table: NDArray[np.float64] | None = None
    proxy_dim: int = 0
    tuning: str = "fixed"

    @property
    def beta2(self) -> np.ndarray:
        return self.params.beta2


class Problem:
    """Standardized design and kernel plumbing for one data/proxy pair.

    Holds the Fortran-ordered design (1, Z, M_std, X, L), the column second
    moments, and the mediator means/scales needed to map coefficients back
    to the original coordinates.  Reused across a warm-started path.
    """

    def __init__(self, y: np.ndarray, z: np.ndarray, m: np.ndarray,
                 x: np.ndarray, proxy: np.ndarray):
        self.y = np.asarray(y, dtype=float)
        n = self.y.shape[0]
        proxy = np.asarray(proxy, dtype=float)
        if proxy.ndim == 1:
            proxy = proxy[:, None]
        if proxy.shape[0] != n:
            raise ValidationError("proxy row count does not match outcome length")
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        m_std, self.m_mean, self.m_scale = standardize_columns(m)
        self.n = n
        self.p = m.shape[1]
        self.q = x.shape[1]
        self.t = proxy.shape[1]
        self.W = np.asfortranarray(
            np.column_stack([np.ones(n), z, m_std, x, proxy])
        )
        self.d = self.W.shape[1]
        self.colsq = np.ascontiguousarray((self.W**2).mean(axis=0))
        self.pen_slice = slice(2, 2 + self.p)
        self._gram: np.ndarray | None = None
        self._gram_y: np.ndarray | None = None

    def gram(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached (W'W/n, W'y/n) for the active-set acceleration solves."""
        if self._gram is None:
            self._gram = self.W.T @ self.W / self.n
            self._gram_y = self.W.T @ self.y / self.n
        return self._gram, self._gram_y

    def thresholds(self, lam: float, weights: np.ndarray) -> np.ndarray:
        """Per-coordinate soft thresholds; scale-folded so the raw-coordinate
        objective is the one optimized."""
        t = np.zeros(self.d)
        t[self.pen_slice] = lam * (weights / self.m_scale) / (2.0 * self.n)
        return t

    def solve(self, lam: float, weights: np.ndarray,
              beta: np.ndarray | None = None, resid: np.ndarray | None = None,
              tol: float = CD_TOL, sweep_budget: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray, int]:
        """Run coordinate descent from the given warm state.

        Convergence means a full sweep moves no coefficient by ``tol``.  When
        near-collinear columns stall the sweeps (the proxy block is almost a
        mediator combination by construction), the stationarity system of the
        current active set and signs is solved directly and the result handed
        back to the sweeps for verification; this changes nothing about the
        minimizer, only how fast it is reached.

        Returns (beta, resid, sweeps).
        """
        if beta is None:
            beta = np.zeros(self.d)
            resid = self.y.copy()
        thresh = self.thresholds(lam, weights)
        sweeps = 0
        chunk = 10
        while sweeps < sweep_budget:
            used, converged = _kernel.cd_solve(
                self.W, resid, beta, thresh, self.colsq, tol,
                min(chunk, sweep_budget - sweeps), True,
            )
            sweeps += used
            if converged:
                return beta, resid, sweeps
            self._active_set_solve(beta, resid, thresh)
            # on numerically flat designs the coefficient-step criterion is
            # unattainable in double precision; a machine-level stationarity
            # certificate is the honest exit then
            if self._kkt_std(beta, thresh) <= self._kkt_exit_tol():
                return beta, resid, sweeps
            chunk = min(2 * chunk, 200)
        raise ConvergenceError(
            f"coordinate descent did not converge within {sweep_budget} sweeps "
            f"(lam={lam:.4g}, n={self.n}, p={self.p}); "
            "check the design for near-duplicate columns"
        )

    def _kkt_std(self, beta: np.ndarray, thresh: np.ndarray) -> float:
        """Stationarity violation of the standardized problem via the Gram."""
        G, gy = self.gram()
        grad = 2.0 * (G @ beta - gy)
        sub = 2.0 * thresh
        nonzero = beta != 0.0
        pen = thresh > 0.0
        viol = np.where(
            pen & nonzero, np.abs(grad + sub * np.sign(beta)),
            np.where(pen, np.maximum(np.abs(grad) - sub, 0.0), np.abs(grad)),
        )
        return float(viol.max(initial=0.0))

    def _kkt_exit_tol(self) -> float:
        _, gy = self.gram()
        return 1e-8 * max(1.0, float(np.abs(gy).max(initial=0.0)))

    def _active_set_solve(self, beta: np.ndarray, resid: np.ndarray,
                          thresh: np.ndarray) -> None:
        """Feature-sign search step: exact sign-restricted solves, in place.

        Solves ``(W'W/n) b = W'y/n - thresh * s`` on the current active set,
        line-searches to the first sign crossing when the solution flips an
        assumed sign (the objective is convex along that segment), and
        enters the worst KKT-violating inactive coordinate with the sign of
        its negative gradient.  Each round is objective-non-increasing; a
        final residual recompute keeps the caller's sweep state consistent.
        """
        G, gy = self.gram()
        free = thresh == 0.0
        snapshot = beta.copy()
        obj_old = resid @ resid / self.n + 2.0 * float(thresh @ np.abs(beta))
        for _ in range(4 * self.d + 10):
            active = np.flatnonzero((beta != 0.0) | free)
            if active.size == 0:
                break
            s = np.sign(beta[active])
            rhs = gy[active] - thresh[active] * s
            try:
                sol = np.linalg.solve(G[np.ix_(active, active)], rhs)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(sol)):
                break
            cur = beta[active]
            crossing = (~free[active]) & (np.sign(sol) != s)
            if np.any(crossing):
                den = cur - sol
                gam = np.full(active.size, np.inf)
                ok = crossing & (den != 0.0)
                gam[ok] = cur[ok] / den[ok]
                gmin = float(np.min(gam[crossing]))
                if not np.isfinite(gmin) or not (0.0 <= gmin <= 1.0):
                    gmin = 0.0
                newv = cur + gmin * (sol - cur)
                newv[crossing & (gam <= gmin * (1 + 1e-12))] = 0.0
                beta[active] = newv
                if gmin == 0.0:
                    break  # no progress possible along this sign pattern
                continue
            beta[active] = sol
            grad = 2.0 * (G @ beta - gy)
            inactive = np.flatnonzero((beta == 0.0) & ~free)
            if inactive.size == 0:
                break
            viol = np.abs(grad[inactive]) - 2.0 * thresh[inactive]
            worst = int(np.argmax(viol))
            if viol[worst] <= self._kkt_exit_tol():
                break
            j = int(inactive[worst])
            beta[j] = -np.sign(grad[j]) * 1e-300  # enter with the optimal sign
        new_resid = self.y - self.W @ beta
        obj_new = new_resid @ new_resid / self.n + 2.0 * float(thresh @ np.abs(beta))
        if obj_new <= obj_old + 1e-12 * (1.0 + abs(obj_old)):
            resid[:] = new_resid
        else:  # degenerate solve: restore the incoming state
            beta[:] = snapshot
            resid[:] = self.y - self.W @ beta

    def destandardize(self, beta_std: np.ndarray) -> OutcomeParams:
        b = beta_std.copy()
        b2 = b[self.pen_slice] / self.m_scale
        b0 = b[0] - float(b[self.pen_slice] @ (self.m_mean / self.m_scale))
        return OutcomeParams(
            beta0=b0,
            beta1=float(b[1]),
            beta2=b2,
            beta3=b[2 + self.p : 2 + self.p + self.q],
            phi=b[2 + self.p + self.q :],
        )

    def objective(self, beta_std: np.ndarray, resid: np.ndarray,
                  lam: float, weights: np.ndarray) -> float:
        pen = float(np.sum(weights * np.abs(beta_std[self.pen_slice] / self.m_scale)))
        return float(np.mean(resid**2) + lam * pen / self.n)

    def unpenalized_residual(self, weights: np.ndarray) -> np.ndarray:
        """Residual of the model with all positively-weighted mediators at zero."""
        free = [0, 1] + [2 + r for r in range(self.p) if weights[r] == 0.0]
        free += list(range(2 + self.p, self.d))
        Wf = self.W[:, free]
        coef, *_ = np.linalg.lstsq(Wf, self.y, rcond=None)
        return self.y - Wf @ coef


def lambda_max(problem: Problem, weights: np.ndarray) -> float:
    """Smallest penalty level that zeroes every positively-weighted mediator."""
    resid0 = problem.unpenalized_residual(weights)
    w_eff = weights / problem.m_scale
    corr = np.abs(problem.W[:, problem.pen_slice].T @ resid0)
    with np.errstate(divide="ignore"):
        vals = np.where(w_eff > 0, 2.0 * corr / np.where(w_eff > 0, w_eff, 1.0), 0.0)
    lmax = float(np.max(vals)) if vals.size else 0.0
    return lmax if lmax > 0 else 1.0


def default_lambda_grid(problem: Problem, weights: np.ndarray,
                        n_lambda: int = N_LAMBDA_DEFAULT,
                        min_ratio: float = LAMBDA_MIN_RATIO) -> np.ndarray:
    """Log-spaced grid from lambda_max down to min_ratio * lambda_max."""
    lmax = lambda_max(problem, weights)
    return lmax * np.logspace(0.0, np.log10(min_ratio), n_lambda)


def _path(problem: Problem, grid: np.ndarray, weights: np.ndarray):
    """Warm-started solutions along a descending penalty grid."""
    beta = np.zeros(problem.d)
    resid = problem.y.copy()
    out = []
    for lam in grid:
        beta, resid, _ = problem.solve(lam, weights, beta, resid)
        out.append((beta.copy(), resid.copy()))
    return out


def as_proxy_matrix(proxy, n: int) -> np.ndarray:
    proxy = np.asarray(proxy, dtype=float)
    if proxy.ndim == 1:
        proxy = proxy[:, None]
    if proxy.shape[0] != n:
        raise ValidationError("proxy row count does not match outcome length")
    return proxy


def fit_partial_lasso(d: Dataset, proxy: np.ndarray, spec: PenaltySpec,
                      cv_table: np.ndarray | None = None) -> OutcomeFit:
    """Solve the partially penalized problem at a fixed penalty level.

    Unpenalized coordinates take exact least-squares steps and mediator
    coordinates soft-thresholded steps inside cyclic coordinate descent;
    the sweep stops when no coefficient moves by 1e-9.  The KKT conditions
    are verified post hoc and the solver re-enters with a tighter tolerance
    in the rare case they fail.
    """
    w = np.asarray(spec.weights, dtype=float)
    if w.shape[0] != d.p:
        raise ValidationError(f"weights have length {w.shape[0]}, need p={d.p}")
    proxy = as_proxy_matrix(proxy, d.n)
    if not all(np.all(np.isfinite(a)) for a in (d.y, d.z, d.m, d.x, proxy)):
        raise ValidationError("design or outcome contains non-finite entries")
    problem = Problem(d.y, d.z, d.m, d.x, proxy)
    beta, resid, sweeps = problem.solve(spec.lam, w)
    budget = MAX_SWEEPS - sweeps
    tol = CD_TOL
    while True:
        params = problem.destandardize(beta)
        viol = _kkt_violation(params, d, proxy, spec.lam, w)
        if viol <= KKT_TOL / 10 or budget <= 0:
            break
        tol /= 10.0
        beta, resid, used = problem.solve(spec.lam, w, beta, resid, tol=tol,
                                          sweep_budget=budget)
        budget -= used
        sweeps += used
    return OutcomeFit(
        params=params,
        active_set=np.flatnonzero(params.beta2 != 0.0),
        residuals=resid.copy(),
        lambda_used=float(spec.lam),
        delta_used=float(spec.delta),
        objective=problem.objective(beta, resid, spec.lam, w),
        kkt_violation=viol,
        sweeps=sweeps,
        cv_table=cv_table,
        proxy_dim=problem.t,
    )


def _kkt_violation(params: OutcomeParams, d: Dataset, proxy: np.ndarray,
                   lam: float, weights: np.ndarray) -> float:
    from .proxy import design_matrix

    W = design_matrix(d, proxy)
    psi = d.y - W @ params.flatten()
    grad = -2.0 * (W.T @ psi) / d.n
    lamw = lam * np.asarray(weights, dtype=float) / d.n
    p = d.p
    g2 = grad[2 : 2 + p]
    b2 = params.beta2
    nonzero = b2 != 0.0
    pen_viol = np.where(
        nonzero,
        np.abs(g2 + lamw * np.sign(b2)),
        np.maximum(np.abs(g2) - lamw, 0.0),
    )
    free_viol = np.abs(np.concatenate([grad[:2], grad[2 + p :]]))
    return float(max(pen_viol.max(initial=0.0), free_viol.max(initial=0.0)))


def kkt_check(fit: OutcomeFit, d: Dataset, proxy: np.ndarray, spec: PenaltySpec) -> float:
    """Maximum violation of the stationarity conditions, in original coordinates.

    For unpenalized coordinates the smooth gradient must vanish; active
    mediators must balance the (lam w / n)-scaled subgradient; inactive
    mediators must have gradient within the threshold.
    """
    proxy = as_proxy_matrix(proxy, d.n)
    return _kkt_violation(fit.params, d, proxy, spec.lam, spec.weights)


def adaptive_weights(beta_la_2: np.ndarray, delta: float, n: int) -> np.ndarray:
    """Weights ``|beta + 1/n|^(-delta)`` from an initial lasso estimate."""
    if delta <= 0:
        raise ValidationError(f"adaptive exponent must be > 0, got {delta}")
    if n < 1:
        raise ValidationError(f"sample size must be >= 1, got {n}")
    base = np.asarray(beta_la_2, dtype=float) + 1.0 / n
    if np.any(base == 0.0):
        warnings.warn(
            "initial estimate hit the -1/n offset exactly; substituting the -1/n offset",
            RuntimeWarning,
        )
        flipped = np.asarray(beta_la_2, dtype=float) - 1.0 / n
        base = np.where(base == 0.0, flipped, base)
    w = np.abs(base) ** (-float(delta))
    if np.any(~np.isfinite(w)):
        raise ValidationError("adaptive weights are non-finite")
    return w


def cross_validate(d: Dataset, proxy: np.ndarray, weights: np.ndarray,
                   lambda_grid: np.ndarray, folds: int, seed: int,
                   rule: str = "min") -> tuple[float, np.ndarray]:
    """K-fold cross-validation of the penalty level on squared prediction error.

    The grid is deduplicated and sorted descending; paths are warm-started
    per fold; ties in mean CV error break toward the larger (sparser)
    penalty.  Fold assignment is a deterministic function of the seed.

    ``rule="min"`` picks the error-minimizing penalty; ``rule="1se"`` picks
    the largest penalty whose mean error stays within one standard error of
    the minimum (the usual guard against overselection on flat curves).

    Returns
    -------
    (lambda_star, cv_table) where cv_table has rows (lambda, mean, se).
    """
    if rule not in ("min", "1se"):
        raise ValidationError(f"unknown cross-validation rule {rule!r}")
    grid = np.unique(np.asarray(lambda_grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValidationError("penalty grid is empty")
    if np.any(grid <= 0):
        raise ValidationError("penalty grid entries must be positive")
    if folds < 2:
        raise ValidationError(f"need at least 2 folds, got {folds}")
    weights = np.asarray(weights, dtype=float)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(d.n)
    fold_idx = np.array_split(perm, folds)

    from .proxy import design_matrix

    proxy2 = np.asarray(proxy, dtype=float)
    if proxy2.ndim == 1:
        proxy2 = proxy2[:, None]
    R_full = design_matrix(d, proxy2)

    fold_errs = []
    for k, val in enumerate(fold_idx):
        if val.size == 0:
            continue
        train = np.setdiff1d(perm, val, assume_unique=True)
        y_tr = d.y[train]
        if np.ptp(y_tr) == 0.0:
            warnings.warn(f"fold {k}: constant outcome in training part; fold skipped",
                          RuntimeWarning)
            continue
        prob = Problem(y_tr, d.z[train], d.m[train], d.x[train], proxy2[train])
        path = _path(prob, grid, weights)
        R_val = R_full[val]
        y_val = d.y[val]
        errs = np.empty(grid.size)
        for i, (beta_std, _) in enumerate(path):
            pred = R_val @ prob.destandardize(beta_std).flatten()
            errs[i] = float(np.mean((y_val - pred) ** 2))
        fold_errs.append(errs)
    if not fold_errs:
        raise ValidationError("all cross-validation folds were skipped")
    E = np.vstack(fold_errs)
    mean = E.mean(axis=0)
    se = E.std(axis=0, ddof=1) / np.sqrt(E.shape[0]) if E.shape[0] > 1 else np.zeros(grid.size)
    best = int(np.argmin(mean))  # first minimum = largest penalty among ties
    if rule == "1se":
        cutoff = mean[best] + se[best]
        best = int(np.flatnonzero(mean <= cutoff)[0])  # grid is descending
    cv_table = np.column_stack([grid, mean, se])
    return float(grid[best]), cv_table


def fit_cv(d: Dataset, proxy: np.ndarray, weights: np.ndarray, *,
           delta: float = DELTA_DEFAULT, folds: int = 5, seed: int = 0,
           n_lambda: int = N_LAMBDA_DEFAULT,
           min_ratio: float = LAMBDA_MIN_RATIO, rule: str = "min") -> OutcomeFit:
    """Cross-validate the penalty level on the default grid, then fit at it."""
    proxy2 = as_proxy_matrix(proxy, d.n)
    problem = Problem(d.y, d.z, d.m, d.x, proxy2)
    grid = default_lambda_grid(problem, np.asarray(weights, dtype=float),
                               n_lambda=n_lambda, min_ratio=min_ratio)
    lam_star, cv_table = cross_validate(d, proxy2, weights, grid, folds, seed, rule=rule)
    spec = PenaltySpec(lam=lam_star, weights=np.asarray(weights, dtype=float), delta=delta)
    fit = fit_partial_lasso(d, proxy2, spec, cv_table=cv_table)
    return replace(fit, tuning=f"cv-{rule}")


def fit_bic(d: Dataset, proxy: np.ndarray, weights: np.ndarray, *,
            delta: float = DELTA_DEFAULT, n_lambda: int = N_LAMBDA_DEFAULT,
            min_ratio: float = LAMBDA_MIN_RATIO) -> OutcomeFit:
    """Tune the penalty level by BIC along the warm-started path.

    ``BIC(lam) = n log(mean residual^2) + df log(n)`` with df counting the
    unpenalized block plus the active mediators.  Selection-consistent for
    the adaptive stage, where prediction-error minimization is known to
    keep spurious coordinates; ties break toward the larger penalty.
    """
    proxy2 = as_proxy_matrix(proxy, d.n)
    weights = np.asarray(weights, dtype=float)
    problem = Problem(d.y, d.z, d.m, d.x, proxy2)
    grid = default_lambda_grid(problem, weights, n_lambda=n_lambda, min_ratio=min_ratio)
    grid = np.unique(grid)[::-1]
    free = 2 + problem.q + problem.t
    bic = np.empty(grid.size)
    for i, (beta_std, resid) in enumerate(_path(problem, grid, weights)):
        df = free + int(np.count_nonzero(beta_std[problem.pen_slice]))
        bic[i] = d.n * np.log(np.mean(resid**2)) + df * np.log(d.n)
    best = int(np.argmin(bic))  # descending grid: first minimum = largest penalty
    table = np.column_stack([grid, bic, np.zeros(grid.size)])
    spec = PenaltySpec(lam=float(grid[best]), weights=weights, delta=delta)
    fit = fit_partial_lasso(d, proxy2, spec, cv_table=table)
    return replace(fit, tuning="bic")
