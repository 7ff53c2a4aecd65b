import numpy as np
import pytest
from scipy.stats import ortho_group

import medpath as mp
from medpath import Dataset
from medpath.proxy import check_condition_ii, compute_delta, compute_proxy, design_matrix


class TestComputeDelta:
    def test_symmetric_three_mediator_case(self):
        delta = compute_delta(np.ones((3, 1)), np.ones(3))
        np.testing.assert_allclose(delta[:, 0], [0.25, 0.25, 0.25], atol=1e-12)

    def test_zero_loading(self):
        delta = compute_delta(np.zeros((3, 1)), np.ones(3))
        np.testing.assert_array_equal(delta, np.zeros((3, 1)))

    def test_two_mediator_direct_inverse(self):
        gamma = np.array([[1.0], [2.0]])
        delta = compute_delta(gamma, np.ones(2))
        np.testing.assert_allclose(delta[:, 0], [1.0 / 6.0, 2.0 / 6.0], atol=1e-12)
        # rank-one identity: delta = gamma / (1 + gamma'gamma)
        np.testing.assert_allclose(delta, gamma / 6.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_woodbury_matches_direct_inverse(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.integers(3, 9), rng.integers(1, 3)
        gamma = rng.standard_normal((p, t))
        uniq = rng.uniform(0.3, 3.0, p)
        direct = np.linalg.solve(gamma @ gamma.T + np.diag(uniq), gamma)
        np.testing.assert_allclose(compute_delta(gamma, uniq), direct, rtol=1e-10, atol=1e-12)


class TestComputeProxy:
    def test_symmetric_case_formula_on_exact_residuals(self):
        rng = np.random.default_rng(21)
        n = 50
        z, x, u = rng.standard_normal((3, n))
        eps = rng.standard_normal((n, 3))
        m = np.column_stack([
            z + x + z * x + u + eps[:, 0],
            z + x + u + eps[:, 1],
            z + x + u + eps[:, 2],
        ])
        resid = m - np.column_stack([z + x + z * x, z + x, z + x])
        delta = compute_delta(np.ones((3, 1)), np.ones(3))
        proxy = compute_proxy(resid, delta)
        direct = (m.sum(axis=1) - 3 * z - 3 * x - z * x) / 4.0
        np.testing.assert_allclose(proxy[:, 0], direct, atol=1e-10)

    def test_zero_delta(self):
        resid = np.random.default_rng(1).standard_normal((10, 3))
        np.testing.assert_array_equal(compute_proxy(resid, np.zeros((3, 1))), np.zeros((10, 1)))

    def test_single_observation_dot_product(self):
        proxy = compute_proxy(np.array([[4.0, 0.0, 0.0]]), np.full((3, 1), 0.25))
        assert proxy.shape == (1, 1) and proxy[0, 0] == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_proxy(np.zeros((5, 3)), np.zeros((4, 1)))


class TestConditionII:
    def _example_dataset(self, n, interaction=True, seed=0):
        rng = np.random.default_rng(seed)
        z, x, u = rng.standard_normal((3, n))
        eps = rng.standard_normal((n, 3))
        first = z + x + (z * x if interaction else 0.0)
        m = np.column_stack([first + u + eps[:, 0], z + x + u + eps[:, 1], z + x + u + eps[:, 2]])
        g = np.column_stack([first, z + x, z + x])
        resid = m - g
        d = Dataset(y=np.zeros(n), z=z, m=m, x=x[:, None])
        proxy = compute_proxy(resid, compute_delta(np.ones((3, 1)), np.ones(3)))
        return d, proxy

    def test_interaction_breaks_collinearity(self):
        d, proxy = self._example_dataset(5000, interaction=True)
        assert check_condition_ii(d, proxy)["holds"]

    def test_linear_mean_model_degenerate(self):
        d, proxy = self._example_dataset(5000, interaction=False)
        res = check_condition_ii(d, proxy)
        assert not res["holds"]
        assert res["rank"] < res["dim"]

    def test_too_few_rows(self):
        d, proxy = self._example_dataset(5, interaction=True)
        assert not check_condition_ii(d, proxy)["holds"]


class TestRotationCovariance:
    def test_proxy_rotates_with_loading(self, scenario1_fits):
        d, _, mfit, ffit, prox = scenario1_fits
        t = 2
        ffit2 = mp.fit_factor(mfit.residuals, t)
        delta = compute_delta(ffit2.loading, ffit2.uniqueness)
        proxy = compute_proxy(mfit.residuals, delta)
        A = ortho_group.rvs(t, random_state=7)
        delta_rot = compute_delta(ffit2.loading @ A, ffit2.uniqueness)
        proxy_rot = compute_proxy(mfit.residuals, delta_rot)
        np.testing.assert_allclose(proxy_rot, proxy @ A, atol=1e-10)
        # span is rotation-invariant: principal angles vanish
        q1, _ = np.linalg.qr(proxy)
        q2, _ = np.linalg.qr(proxy_rot)
        angles = np.linalg.svd(q1.T @ q2, compute_uv=False)
        np.testing.assert_allclose(angles, 1.0, atol=1e-8)

    def test_condition_ii_rotation_invariant(self, scenario1_fits):
        d, _, mfit, _, prox = scenario1_fits
        base = check_condition_ii(d, prox.proxy)
        A = np.array([[-1.0]])  # one-dimensional rotations are sign flips
        rot = check_condition_ii(d, prox.proxy @ A)
        assert base["holds"] == rot["holds"]
        assert base["rank"] == rot["rank"]
        assert base["condition_number"] == pytest.approx(rot["condition_number"], rel=1e-6)

    def test_second_factor_on_one_factor_data_degenerates(self, scenario1_fits):
        # the spurious second proxy column is a mediator combination with no
        # basis content left, so the full design second moment loses rank
        d, _, mfit, _, _ = scenario1_fits
        ffit2 = mp.fit_factor(mfit.residuals, 2)
        delta = compute_delta(ffit2.loading, ffit2.uniqueness)
        proxy = compute_proxy(mfit.residuals, delta)
        res = check_condition_ii(d, proxy)
        A = ortho_group.rvs(2, random_state=3)
        rot = check_condition_ii(d, proxy @ A)
        assert res["holds"] == rot["holds"]
        assert res["rank"] == rot["rank"]


def test_proxy_definition_consistency(scenario1_fits):
    # cov(L, resid) = delta' cov(resid): the defining projection identity
    d, _, mfit, ffit, prox = scenario1_fits
    resid = mfit.residuals
    n = resid.shape[0]
    cov_lm = prox.proxy.T @ resid / n
    cov_mm = resid.T @ resid / n
    np.testing.assert_allclose(cov_lm, prox.delta.T @ cov_mm, rtol=1e-8, atol=1e-10)


def test_design_matrix_layout(scenario1_fits):
    d, _, _, _, prox = scenario1_fits
    R = design_matrix(d, prox.proxy)
    assert R.shape == (d.n, 2 + d.p + d.q + 1)
    np.testing.assert_array_equal(R[:, 0], np.ones(d.n))
    np.testing.assert_array_equal(R[:, 1], d.z)
    np.testing.assert_array_equal(R[:, -1], prox.proxy[:, 0])
