"""Acceptance gate: every criterion at its stated tolerance.

The replication cells reproduce the simulation tables (200 replications
each); the remaining criteria are exactness, invariance, oracle, and
Monte Carlo calibration checks.  Each test prints one pass/fail line via
the conftest recorder and the collected lines are echoed in the terminal
summary.
"""

import numpy as np
import pytest
from scipy.stats import ortho_group

import medpath as mp
from medpath import Dataset, PenaltySpec
from medpath.factor_model import FactorFit
from medpath.inference import adjust_pvalues, estimate_sandwich, select_active_pathways
from medpath.mediator_model import fit_mediator_model
from medpath.penalized import adaptive_weights, fit_bic, fit_cv, fit_partial_lasso, lambda_max, Problem
from medpath.pipeline import PipelineConfig, run_pipeline
from medpath.proxy import build_proxy, compute_delta, compute_proxy
from medpath.simulation import SIMULATION_BASIS, SimConfig, run_replications

from conftest import record_acceptance
from test_inference import FIXED_VECTORS, closure_oracle, bonferroni_local, simes_local, stepup_oracle
from test_penalized import grid_search_oracle, random_instance

N_REPS = 200


def _row(rows, method):
    return next(r for r in rows if r.method == method)


@pytest.fixture(scope="module")
def cell_phi1():
    cfg = SimConfig(n=1000, p=100, scenario=1, phi=1.0, n_reps=N_REPS, seed=101,
                    methods=("proposed",))
    return run_replications(cfg)


@pytest.fixture(scope="module")
def cell_phi4():
    cfg = SimConfig(n=1000, p=100, scenario=1, phi=4.0, n_reps=N_REPS, seed=102)
    return run_replications(cfg)


@pytest.mark.slow
class TestCriterion1Table1:
    def test_1a_phi1(self, cell_phi1):
        r = _row(cell_phi1, "proposed")
        ok = r.mse <= 0.03 and abs(r.tp - 5.0) <= 0.05 and r.fp <= 0.2
        record_acceptance("1a table-1 n=1000 phi=1",
                          ok, f"MSE={r.mse:.4f} (<=0.03) TP={r.tp:.3f} (5+-0.05) FP={r.fp:.3f} (<=0.2)")
        assert r.mse <= 0.03
        assert abs(r.tp - 5.0) <= 0.05
        assert r.fp <= 0.2

    def test_1b_phi4(self, cell_phi4):
        r = _row(cell_phi4, "proposed")
        ok = r.mse <= 0.10 and r.fp <= 0.3
        record_acceptance("1b table-1 n=1000 phi=4",
                          ok, f"MSE={r.mse:.4f} (<=0.10) FP={r.fp:.3f} (<=0.3)")
        assert r.mse <= 0.10
        assert r.fp <= 0.3

    def test_1c_small_sample(self):
        cfg = SimConfig(n=300, p=100, scenario=1, phi=1.0, n_reps=N_REPS, seed=103,
                        methods=("proposed",))
        r = _row(run_replications(cfg), "proposed")
        record_acceptance("1c table-1 n=300 phi=1", r.mse <= 0.12,
                          f"MSE={r.mse:.4f} (<=0.12)")
        assert r.mse <= 0.12


@pytest.mark.slow
class TestCriterion2Baselines:
    def test_naive_contrast(self, cell_phi4):
        nad = _row(cell_phi4, "naive_adaptive_lasso")
        nl = _row(cell_phi4, "naive_lasso")
        ok = 1.1 <= nad.mse <= 1.7 and 4.5 <= nad.fp <= 5.5 and nl.fp >= 8.0
        record_acceptance(
            "2 table-1 baselines n=1000 phi=4", ok,
            f"naive-adaptive MSE={nad.mse:.3f} (in [1.1,1.7]) FP={nad.fp:.3f} (in [4.5,5.5]); "
            f"naive-lasso FP={nl.fp:.2f} (>=8)")
        assert 1.1 <= nad.mse <= 1.7
        assert 4.5 <= nad.fp <= 5.5
        assert nl.fp >= 8.0


@pytest.mark.slow
def test_criterion3_scenario2():
    cfg = SimConfig(n=1000, p=100, scenario=2, phi=1.0, n_reps=N_REPS, seed=104,
                    methods=("proposed",))
    r = _row(run_replications(cfg), "proposed")
    ok = r.mse <= 0.15 and abs(r.tp - 20.0) <= 0.1 and r.fp <= 0.2
    record_acceptance("3 table-2 scenario-2 n=1000 phi=1", ok,
                      f"MSE={r.mse:.4f} (<=0.15) TP={r.tp:.3f} (20+-0.1) FP={r.fp:.3f} (<=0.2)")
    assert r.mse <= 0.15
    assert abs(r.tp - 20.0) <= 0.1
    assert r.fp <= 0.2


@pytest.mark.slow
class TestCriterion4Misspecification:
    def test_phi1_equal_1(self):
        cfg = SimConfig(n=1000, p=100, scenario=1, phi=4.0, phi1=1.0, n_reps=N_REPS,
                        seed=105, methods=("proposed",))
        r = _row(run_replications(cfg), "proposed")
        ok = r.mse <= 0.15 and r.fp <= 0.5
        record_acceptance("4 table-3 phi1=1", ok,
                          f"MSE={r.mse:.4f} (<=0.15) FP={r.fp:.3f} (<=0.5)")
        assert r.mse <= 0.15
        assert r.fp <= 0.5

    def test_phi1_equal_2(self):
        cfg = SimConfig(n=1000, p=100, scenario=1, phi=4.0, phi1=2.0, n_reps=N_REPS,
                        seed=106, methods=("proposed",))
        r = _row(run_replications(cfg), "proposed")
        record_acceptance("4 table-3 phi1=2", r.mse <= 0.5, f"MSE={r.mse:.4f} (<=0.5)")
        assert r.mse <= 0.5


def test_criterion5_projection_exactness():
    delta = compute_delta(np.ones((3, 1)), np.ones(3))
    delta_ok = np.abs(delta[:, 0] - 0.25).max() <= 1e-12

    rng = np.random.default_rng(55)
    n = 200
    z, x, u = rng.standard_normal((3, n))
    eps = rng.standard_normal((n, 3))
    m = np.column_stack([
        z + x + z * x + u + eps[:, 0],
        z + x + u + eps[:, 1],
        z + x + u + eps[:, 2],
    ])
    resid = m - np.column_stack([z + x + z * x, z + x, z + x])
    proxy = compute_proxy(resid, delta)
    direct = (m.sum(axis=1) - 3 * z - 3 * x - z * x) / 4.0
    proxy_ok = np.abs(proxy[:, 0] - direct).max() <= 1e-10
    record_acceptance("5 projection exactness", delta_ok and proxy_ok,
                      f"delta err={np.abs(delta[:, 0] - 0.25).max():.2e} "
                      f"proxy err={np.abs(proxy[:, 0] - direct).max():.2e}")
    assert delta_ok and proxy_ok


@pytest.mark.slow
def test_criterion6_rotation_invariance_suite():
    cfg = SimConfig(n=800, p=50, scenario=1, phi=2.0, n_reps=1, seed=60)
    d, _ = mp.generate(cfg, 0)
    mfit = fit_mediator_model(d, SIMULATION_BASIS)
    ffit = mp.fit_factor(mfit.residuals, 2)
    proxy = compute_proxy(mfit.residuals, compute_delta(ffit.loading, ffit.uniqueness))

    ones = np.ones(d.p)
    init = fit_cv(d, proxy, ones, seed=61, rule="1se")
    w = adaptive_weights(init.params.beta2, 2.0, d.n)
    base = fit_bic(d, proxy, w, delta=2.0)
    lam_init, lam_ad = init.lambda_used, base.lambda_used
    base_sw = estimate_sandwich(d, mfit, ffit, proxy, base)
    nb = 2 + base.active_set.size + d.q
    base_beta = np.concatenate([[base.params.beta0, base.params.beta1],
                                base.params.beta2, base.params.beta3])

    rng = np.random.default_rng(62)
    worst_beta = worst_sigma = worst_phi = 0.0
    for k in range(50):
        A = ortho_group.rvs(2, random_state=rng)
        proxy_rot = proxy @ A
        ffit_rot = FactorFit(loading=ffit.loading @ A, uniqueness=ffit.uniqueness, t=2,
                             loglik=ffit.loglik, iterations=ffit.iterations,
                             converged=ffit.converged)
        init_rot = fit_partial_lasso(d, proxy_rot, PenaltySpec(lam=lam_init, weights=ones))
        w_rot = adaptive_weights(init_rot.params.beta2, 2.0, d.n)
        fit_rot = fit_partial_lasso(d, proxy_rot, PenaltySpec(lam=lam_ad, weights=w_rot, delta=2.0))
        assert np.array_equal(fit_rot.active_set, base.active_set)
        rot_beta = np.concatenate([[fit_rot.params.beta0, fit_rot.params.beta1],
                                   fit_rot.params.beta2, fit_rot.params.beta3])
        worst_beta = max(worst_beta, float(np.abs(rot_beta - base_beta).max()))
        worst_phi = max(worst_phi, float(np.abs(fit_rot.params.phi - A.T @ base.params.phi).max()))
        sw_rot = estimate_sandwich(d, mfit, ffit_rot, proxy_rot, fit_rot)
        block = sw_rot.sigma_ad[:nb, :nb] - base_sw.sigma_ad[:nb, :nb]
        scale = np.abs(base_sw.sigma_ad[:nb, :nb]).max()
        worst_sigma = max(worst_sigma, float(np.abs(block).max() / scale))
    ok = worst_beta <= 1e-6 and worst_sigma <= 1e-6 and worst_phi <= 1e-6
    record_acceptance("6 rotation invariance (50 rotations)", ok,
                      f"max |d beta|={worst_beta:.2e} max rel |d Sigma_beta|={worst_sigma:.2e} "
                      f"max |phi - A'phi|={worst_phi:.2e} (<=1e-6)")
    assert ok


@pytest.mark.slow
def test_criterion7_optimizer_oracle():
    worst_gap = worst_kkt = 0.0
    rng = np.random.default_rng(70)
    for i in range(100):
        d, proxy = random_instance(n=50, p=2, seed=1000 + i, noise=float(rng.uniform(0.2, 1.5)))
        prob = Problem(d.y, d.z, d.m, d.x, proxy)
        lam = float(rng.uniform(0.05, 1.2) * lambda_max(prob, np.ones(2)))
        spec = PenaltySpec(lam=lam, weights=np.ones(2))
        fit = fit_partial_lasso(d, proxy, spec)
        oracle_obj, _ = grid_search_oracle(d, proxy, lam, np.ones(2))
        worst_gap = max(worst_gap, abs(fit.objective - oracle_obj))
        worst_kkt = max(worst_kkt, fit.kkt_violation)
    ok = worst_gap <= 1e-6 and worst_kkt <= 1e-6
    record_acceptance("7 optimizer vs grid oracle (100 instances)", ok,
                      f"max objective gap={worst_gap:.2e} max KKT={worst_kkt:.2e} (<=1e-6)")
    assert ok


def test_criterion8_gradient_checks():
    from medpath import ParameterVectorNu, evaluate_q
    from medpath.mediator_model import build_design

    rng = np.random.default_rng(80)
    worst = 0.0
    eps13 = np.finfo(float).eps ** (1.0 / 3.0)
    for i in range(100):
        p = int(rng.integers(4, 9))
        t = int(rng.integers(1, 3))
        z, xv = rng.standard_normal(2)
        m_row = rng.standard_normal(p)
        gamma = rng.standard_normal((p, 4))
        loading = rng.standard_normal((p, t))
        uniq = rng.uniform(0.5, 2.0, p)
        nu = ParameterVectorNu(gamma=gamma.ravel(), gamma_layout=(p, 4),
                               loading=loading, uniqueness=uniq)
        q = evaluate_q(z, m_row, np.array([xv]), nu, SIMULATION_BASIS)
        d1 = Dataset(y=np.zeros(1), z=np.array([z]), m=m_row[None, :], x=np.array([[xv]]))
        B = build_design(d1, SIMULATION_BASIS)[0]

        def factor_objective(alpha):
            G = alpha[: p * t].reshape(p, t)
            u = alpha[p * t:]
            resid = m_row - B @ gamma.T
            S = G @ G.T + np.diag(u)
            return float(resid @ np.linalg.solve(S, resid) + np.linalg.slogdet(S)[1])

        def sq_norm(gvec):
            return float(np.sum((m_row - B @ gvec.reshape(p, 4).T) ** 2))

        alpha0 = nu.alpha()
        fd_alpha = np.empty(alpha0.size)
        h = eps13 * np.maximum(1.0, np.abs(alpha0))
        for c in range(alpha0.size):
            up, dn = alpha0.copy(), alpha0.copy()
            up[c] += h[c]
            dn[c] -= h[c]
            fd_alpha[c] = (factor_objective(up) - factor_objective(dn)) / (2 * h[c])
        g0 = gamma.ravel()
        fd_gamma = np.empty(g0.size)
        h = eps13 * np.maximum(1.0, np.abs(g0))
        for c in range(g0.size):
            up, dn = g0.copy(), g0.copy()
            up[c] += h[c]
            dn[c] -= h[c]
            fd_gamma[c] = -0.5 * (sq_norm(up) - sq_norm(dn)) / (2 * h[c])
        fd = np.concatenate([fd_gamma, fd_alpha])
        scale = np.maximum(np.abs(fd), 1e-2)
        worst = max(worst, float((np.abs(q - fd) / scale).max()))
    record_acceptance("8 analytic vs finite-difference gradients (100 points)",
                      worst <= 1e-6, f"max relative error={worst:.2e} (<=1e-6)")
    assert worst <= 1e-6


@pytest.mark.slow
def test_criterion9_coverage():
    n_reps = 500
    cover = np.zeros(5)
    for rep in range(n_reps):
        cfg = SimConfig(n=1000, p=100, scenario=1, phi=1.0, n_reps=1, seed=900)
        d, truth = mp.generate(cfg, rep)
        pc = PipelineConfig(basis=SIMULATION_BASIS, t=1, seed=rep, compute_sandwich=True)
        res = run_pipeline(d, pc)
        active = set(int(j) for j in res.outcome_fit.active_set)
        for j in range(5):
            if j in active:
                b = res.outcome_fit.params.beta2[j]
                se = res.sandwich.se_of(2 + j)
                if abs(b - 1.0) <= 1.959963984540054 * se:
                    cover[j] += 1
    rates = cover / n_reps
    ok = bool(np.all((rates >= 0.92) & (rates <= 0.98)))
    record_acceptance("9 coverage of 95% CIs (500 reps)", ok,
                      "per-coefficient coverage " + np.array2string(rates, precision=3))
    assert ok


@pytest.mark.slow
def test_criterion10_fwer_bound():
    # three mediators affect the outcome but not through the treatment
    p = 15
    beta2 = np.zeros(p)
    beta2[:8] = 1.0
    gamma1 = np.ones(p)
    gamma1[5:8] = 0.0
    gamma3 = np.zeros(p)
    gamma3[:3] = 0.5
    loading = np.zeros(p)
    loading[:10] = 1.0
    params = mp.DgpParams(beta1=1.0, beta2=beta2, beta3=1.0, gamma1=gamma1,
                          gamma2=np.ones(p), gamma3=gamma3, loading=loading, phi=1.0)
    n_reps = 1000
    false_hits = 0
    power_hits = 0
    for rep in range(n_reps):
        rng = np.random.default_rng(np.random.SeedSequence([1010, rep]))
        d, truth = mp.draw_dataset(params, n=400, rng=rng)
        pc = PipelineConfig(basis=SIMULATION_BASIS, t=1, seed=rep, compute_sandwich=False)
        res = run_pipeline(d, pc)
        report = select_active_pathways(res.outcome_fit, res.mediator_fit,
                                        "bonferroni", 0.05, 1.0, 0.0, d.x)
        act = set(int(j) for j in report.active_pathways)
        if act & {5, 6, 7}:
            false_hits += 1
        if {0, 1, 2, 3, 4} <= act:
            power_hits += 1
    rate = false_hits / n_reps
    record_acceptance("10 family-wise error bound (1000 reps)", rate <= 0.07,
                      f"null-pathway selection rate={rate:.3f} (<=0.07); "
                      f"all-true-pathways rate={power_hits / n_reps:.3f}")
    assert rate <= 0.07


def test_criterion11_multiple_testing_oracles():
    assert len(FIXED_VECTORS) == 20
    worst = "exact"
    for p in FIXED_VECTORS:
        np.testing.assert_array_equal(adjust_pvalues(p, "bonferroni"),
                                      np.clip(len(p) * p, p, 1.0))
        np.testing.assert_array_equal(adjust_pvalues(p, "holm"),
                                      closure_oracle(p, bonferroni_local))
        np.testing.assert_array_equal(adjust_pvalues(p, "hommel"),
                                      closure_oracle(p, simes_local))
        np.testing.assert_array_equal(adjust_pvalues(p, "hochberg"),
                                      stepup_oracle(p, lambda j, m, pj: (m - j + 1) * pj))
        np.testing.assert_array_equal(adjust_pvalues(p, "bh"),
                                      stepup_oracle(p, lambda j, m, pj: m * pj / j))
    record_acceptance("11 multiple-testing corrections (20 vectors x 5 methods)",
                      True, f"all adjusted p-values {worst}")
