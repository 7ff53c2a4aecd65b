"""Synthetic data generators, baselines, replication runner, and metrics.

The generator draws treatment, covariate, latent confounder, and noise as
independent standard normals; mediators load on the confounder through the
first ten coordinates and carry an exp-covariate term in the first three,
which is what makes the proxy identifiable.  Two sparsity patterns for the
mediator-outcome coefficients are built in, plus a quadratic-confounder
misspecification knob for robustness sweeps.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core_types import Dataset, ValidationError
from .mediator_model import BasisSpec, BasisTerm
from .penalized import LAMBDA_MIN_RATIO, N_LAMBDA_DEFAULT, OutcomeFit
from .pipeline import PipelineConfig, fit_naive, run_pipeline

log = logging.getLogger(__name__)

METHODS = ("proposed", "naive_lasso", "naive_adaptive_lasso")

# basis matching the generator's mediator mean structure
SIMULATION_BASIS = BasisSpec(terms=(
    BasisTerm("constant"),
    BasisTerm("treatment"),
    BasisTerm("covariate", index=0),
    BasisTerm("covariate_exp", index=0),
))


@dataclass(frozen=True)
class DgpParams:
    """Coefficient vectors of the generating model; one covariate, scalar confounder."""

    beta1: float
    beta2: NDArray[np.float64]
    beta3: float
    gamma1: NDArray[np.float64]
    gamma2: NDArray[np.float64]
    gamma3: NDArray[np.float64]
    loading: NDArray[np.float64]
    phi: float
    phi1: float = 0.0

    def __post_init__(self):
        for name in ("beta2", "gamma1", "gamma2", "gamma3", "loading"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def p(self) -> int:
        return self.beta2.shape[0]


@dataclass(frozen=True)
class SimTruth:
    beta2_true: NDArray[np.float64]
    active_true: NDArray[np.int64]
    u_values: NDArray[np.float64]


@dataclass(frozen=True)
class SimConfig:
    n: int
    p: int
    scenario: int = 1
    phi: float = 1.0
    phi1: float = 0.0
    n_reps: int = 200
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    folds: int = 5
    n_lambda: int = N_LAMBDA_DEFAULT
    lambda_min_ratio: float = LAMBDA_MIN_RATIO
    delta: float = 2.0
    t: int = 1

    def validate(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append(f"need n >= 1, got {self.n}")
        if self.p < 10:
            out.append(f"the generator confounds the first ten mediators; need p >= 10, got {self.p}")
        if self.scenario not in (1, 2):
            out.append(f"scenario must be 1 or 2, got {self.scenario}")
        if self.scenario == 2 and self.p < 20:
            out.append(f"scenario 2 places 15 active mediators at the tail; need p >= 20, got {self.p}")
        if self.n_reps < 1:
            out.append(f"need n_reps >= 1, got {self.n_reps}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            out.append(f"unknown methods {unknown}; choose from {METHODS}")
        return out


def scenario_params(cfg: SimConfig) -> DgpParams:
    p = cfg.p
    beta2 = np.zeros(p)
    beta2[:5] = 1.0
    if cfg.scenario == 2:
        beta2[p - 15 :] = 1.0
    gamma3 = np.zeros(p)
    gamma3[:3] = 0.5
    loading = np.zeros(p)
    loading[:10] = 1.0
    return DgpParams(
        beta1=1.0, beta2=beta2, beta3=1.0,
        gamma1=np.ones(p), gamma2=np.ones(p), gamma3=gamma3,
        loading=loading, phi=cfg.phi, phi1=cfg.phi1,
    )


def rep_seed_sequence(seed: int, rep: int) -> np.random.SeedSequence:
    """Deterministic child stream for one replication, shared by all methods."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(rep)])


def draw_dataset(params: DgpParams, n: int, rng: np.random.Generator,
                 zero_noise: bool = False) -> tuple[Dataset, SimTruth]:
    """One draw from the generating model (fixed draw order for reproducibility)."""
    p = params.p
    z = rng.standard_normal(n)
    x = rng.standard_normal(n)
    u = rng.standard_normal(n)
    eps = rng.standard_normal((n, p))
    eta = rng.standard_normal(n)
    if zero_noise:
        eps = np.zeros((n, p))
        eta = np.zeros(n)
    m = (
        np.outer(z, params.gamma1)
        + np.outer(x, params.gamma2)
        + np.outer(np.exp(x), params.gamma3)
        + np.outer(u, params.loading)
        + eps
    )
    y = (
        params.beta1 * z
        + m @ params.beta2
        + params.beta3 * x
        + params.phi * u
        + params.phi1 * u**2
        + eta
    )
    d = Dataset(y=y, z=z, m=m, x=x[:, None])
    truth = SimTruth(
        beta2_true=params.beta2.copy(),
        active_true=np.flatnonzero(params.beta2 != 0.0),
        u_values=u,
    )
    return d, truth


def generate(cfg: SimConfig, rep: int, zero_noise: bool = False) -> tuple[Dataset, SimTruth]:
    """Replication ``rep`` of the configured design; deterministic in (seed, rep)."""
    problems = cfg.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    rng = np.random.default_rng(rep_seed_sequence(cfg.seed, rep))
    return draw_dataset(scenario_params(cfg), cfg.n, rng, zero_noise=zero_noise)


def metrics(beta2_hat: np.ndarray, truth: SimTruth) -> tuple[float, float, float]:
    """Summed squared coefficient error plus exact-support true/false positives."""
    beta2_hat = np.asarray(beta2_hat, dtype=float)
    if beta2_hat.shape != truth.beta2_true.shape:
        raise ValidationError(
            f"estimate has length {beta2_hat.shape[0]}, truth has {truth.beta2_true.shape[0]}"
        )
    mse = float(np.sum((beta2_hat - truth.beta2_true) ** 2))
    selected = beta2_hat != 0.0
    truly = truth.beta2_true != 0.0
    tp = float(np.sum(selected & truly))
    fp = float(np.sum(selected & ~truly))
    return mse, tp, fp


@dataclass(frozen=True)
class MetricsRow:
    method: str
    n: int
    p: int
    phi: float
    phi1: float
    mse: float
    tp: float
    fp: float
    n_reps: int
    failures: int = 0


def _fit_one_method(d: Dataset, method: str, cfg: SimConfig, method_seed: int) -> OutcomeFit:
    if method == "proposed":
        pcfg = PipelineConfig(
            basis=SIMULATION_BASIS, t=cfg.t, delta=cfg.delta, folds=cfg.folds,
            n_lambda=cfg.n_lambda, lambda_min_ratio=cfg.lambda_min_ratio,
            seed=method_seed, compute_sandwich=False,
        )
        return run_pipeline(d, pcfg).outcome_fit
    adaptive = method == "naive_adaptive_lasso"
    return fit_naive(d, adaptive, delta=cfg.delta, folds=cfg.folds, seed=method_seed,
                     n_lambda=cfg.n_lambda, lambda_min_ratio=cfg.lambda_min_ratio)


def run_one_replication(cfg: SimConfig, rep: int) -> dict[str, tuple[float, float, float] | None]:
    """Metrics per method for one replication; None marks a failed fit."""
    d, truth = generate(cfg, rep)
    cv_seed = int(rep_seed_sequence(cfg.seed, rep).generate_state(3)[2])
    out: dict[str, tuple[float, float, float] | None] = {}
    for method in cfg.methods:
        try:
            fit = _fit_one_method(d, method, cfg, cv_seed)
            out[method] = metrics(fit.params.beta2, truth)
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            log.warning("replication %d, method %s failed: %s", rep, method, exc)
            out[method] = None
    return out


def run_replications(cfg: SimConfig, workers: int = 1) -> list[MetricsRow]:
    """Average metrics over replications; bit-reproducible given the config.

    Each replication derives its own child seed, so all methods see the
    same data within a replication and results do not depend on the worker
    count.  A failed fit is excluded and counted; more than 5% failures
    aborts the run.
    """
    problems = cfg.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    reps = range(cfg.n_reps)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_worker, [(cfg, r) for r in reps]))
    else:
        results = [run_one_replication(cfg, r) for r in reps]

    rows = []
    total_fits = 0
    total_failures = 0
    for method in cfg.methods:
        vals = [res[method] for res in results]
        ok = [v for v in vals if v is not None]
        failures = len(vals) - len(ok)
        total_fits += len(vals)
        total_failures += failures
        if not ok:
            raise RuntimeError(f"every replication failed for method {method}")
        arr = np.asarray(ok)
        rows.append(MetricsRow(
            method=method, n=cfg.n, p=cfg.p, phi=cfg.phi, phi1=cfg.phi1,
            mse=float(arr[:, 0].mean()), tp=float(arr[:, 1].mean()),
            fp=float(arr[:, 2].mean()), n_reps=len(ok), failures=failures,
        ))
    if total_failures > 0.05 * total_fits:
        raise RuntimeError(
            f"{total_failures} of {total_fits} fits failed (more than 5%); aborting"
        )
    return rows


def _replication_worker(args: tuple[SimConfig, int]):
    cfg, rep = args
    return run_one_replication(cfg, rep)
