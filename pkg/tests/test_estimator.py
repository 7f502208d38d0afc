import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize

import spatdisagg as sd
from spatdisagg.estimator import PENALTY
from spatdisagg.exceptions import RankDeficientError

from conftest import dense_panel_cov


def random_instance(seed, k_grid=2, T=8, sigma=0.5):
    rng = np.random.default_rng(seed)
    spec = sd.ScenarioSpec(
        k=k_grid,
        T=T,
        rho=rng.uniform(-0.6, 0.6),
        phi=rng.uniform(-0.6, 0.6),
        beta0=rng.uniform(-0.6, 0.6),
        beta1=rng.uniform(-0.6, 0.6),
        sigma=sigma,
        seed=seed,
    )
    return sd.generate(spec)


class TestGlsBeta:
    def test_intercept_only_is_scaled_mean(self, grid3):
        rng = np.random.default_rng(1)
        T = 10
        ya = rng.normal(size=T)
        Z = np.ones((9 * T, 1))
        beta = sd.gls_beta(0.0, 0.0, 1.0, Z, ya, grid3)
        assert_allclose(beta, [ya.mean() / 9], rtol=1e-12)

    def test_matches_textbook_gls(self, grid3):
        """Dense GLS formula oracle on a random instance."""
        rng = np.random.default_rng(7)
        n, T = 9, 5
        Z = rng.normal(size=(n * T, 3))
        ya = rng.normal(size=T)
        rho, phi, sigma2 = 0.35, -0.2, 0.7
        params = sd.ModelParams(beta=np.zeros(3), phi1=phi, sigma2=sigma2, rho=rho)
        C = sd.build_aggregator(n, T).dense()
        Ainv = np.linalg.inv(np.eye(n * T) - rho * np.kron(np.eye(T), grid3.w))
        X = C @ Ainv @ Z
        B = C @ dense_panel_cov(params, grid3, T) @ C.T
        Binv = np.linalg.inv(B)
        expected = np.linalg.solve(X.T @ Binv @ X, X.T @ Binv @ ya)
        assert_allclose(sd.gls_beta(rho, phi, sigma2, Z, ya, grid3), expected, rtol=1e-9)

    def test_low_noise_recovery(self):
        spec = sd.ScenarioSpec(k=2, T=40, rho=0.2, phi=0.1, beta0=1.0, beta1=5.0, sigma=0.01, seed=9)
        data = sd.generate(spec)
        beta = sd.gls_beta(spec.rho, spec.phi, spec.sigma**2, data.Z, data.ya, data.weights)
        assert np.all(np.abs(beta - [1.0, 5.0]) < 0.05)

    def test_rank_deficiency_names_columns(self, grid3):
        rng = np.random.default_rng(3)
        T = 6
        z = rng.normal(size=9 * T)
        Z = np.column_stack([np.ones(9 * T), z, z])  # duplicated column
        with pytest.raises(RankDeficientError) as err:
            sd.gls_beta(0.1, 0.0, 1.0, Z, rng.normal(size=T), grid3)
        assert len(err.value.columns) >= 1


class TestConcentratedObjective:
    def test_closed_form_white_noise(self):
        """rho=0, phi=0: aggregated covariance is sigma2 * n * I."""
        w = sd.SpatialWeights.from_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        rng = np.random.default_rng(4)
        n, T = 2, 3
        Z = np.column_stack([np.ones(n * T), rng.normal(size=n * T)])
        ya = rng.normal(size=T)
        sigma2 = 0.8
        beta = sd.gls_beta(0.0, 0.0, sigma2, Z, ya, w)
        e = ya - sd.build_aggregator(n, T).apply(Z @ beta)  # A = I at rho = 0
        expected = 0.5 * (T * np.log(sigma2 * n) + e @ e / (sigma2 * n))
        got = sd.concentrated_negloglik(0.0, 0.0, sigma2, Z, ya, w)
        assert_allclose(got, expected, rtol=1e-12)

    def test_true_parameters_beat_perturbed(self):
        """On low-noise data the objective prefers the truth in most draws."""
        wins = 0
        trials = 50
        for seed in range(trials):
            spec = sd.ScenarioSpec(k=2, T=24, rho=0.3, phi=0.4, beta0=1.0, beta1=5.0, sigma=0.05, seed=seed)
            data = sd.generate(spec)
            args = (data.Z, data.ya, data.weights)
            at_truth = sd.concentrated_negloglik(0.3, 0.4, 0.05**2, *args)
            perturbed = sd.concentrated_negloglik(0.55, 0.15, 0.05**2 * 2.5, *args)
            wins += at_truth <= perturbed
        assert wins >= int(0.95 * trials)

    def test_equals_negated_loglik_at_gls_beta(self, small_data):
        rho, phi, sigma2 = 0.2, -0.3, 0.7
        beta = sd.gls_beta(rho, phi, sigma2, small_data.Z, small_data.ya, small_data.weights)
        params = sd.ModelParams(beta=beta, phi1=phi, sigma2=sigma2, rho=rho)
        direct = -sd.loglik(params, small_data.Z, small_data.ya, small_data.weights)
        concentrated = sd.concentrated_negloglik(
            rho, phi, sigma2, small_data.Z, small_data.ya, small_data.weights
        )
        assert_allclose(concentrated, direct, rtol=1e-12)

    def test_duplicate_column_raises(self, grid3):
        rng = np.random.default_rng(0)
        T = 5
        Z = np.column_stack([np.ones(9 * T), np.ones(9 * T)])
        with pytest.raises(RankDeficientError):
            sd.concentrated_negloglik(0.0, 0.0, 1.0, Z, rng.normal(size=T), grid3)

    def test_penalty_near_singular_filter(self, grid3):
        rng = np.random.default_rng(1)
        T = 4
        Z = np.ones((9 * T, 1))
        with pytest.warns(UserWarning, match="unusable"):
            value = sd.concentrated_negloglik(1 - 1e-14, 0.0, 1.0, Z, rng.normal(size=T), grid3)
        assert value >= PENALTY


class TestScore:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        data = random_instance(seed)
        rng = np.random.default_rng(100 + seed)
        params = sd.ModelParams(
            beta=rng.uniform(-0.6, 0.6, size=2),
            phi1=rng.uniform(-0.6, 0.6),
            sigma2=rng.uniform(0.2, 0.6),
            rho=rng.uniform(-0.6, 0.6),
        )
        analytic = sd.score(params, data.Z, data.ya, data.weights)
        theta = params.theta()
        h = 1e-6
        fd = np.zeros_like(analytic)
        for i in range(len(theta)):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            pu = sd.ModelParams(beta=up[:2], sigma2=up[2], phi1=up[3], rho=up[4])
            pn = sd.ModelParams(beta=dn[:2], sigma2=dn[2], phi1=dn[3], rho=dn[4])
            fd[i] = (
                sd.loglik(pu, data.Z, data.ya, data.weights)
                - sd.loglik(pn, data.Z, data.ya, data.weights)
            ) / (2 * h)
        assert np.all(np.abs(analytic - fd) <= 1e-4 * np.maximum(1.0, np.abs(fd)))

    def test_beta_block_vanishes_at_gls(self, small_data):
        rho, phi, sigma2 = 0.25, 0.3, 0.4
        beta = sd.gls_beta(rho, phi, sigma2, small_data.Z, small_data.ya, small_data.weights)
        params = sd.ModelParams(beta=beta, phi1=phi, sigma2=sigma2, rho=rho)
        s = sd.score(params, small_data.Z, small_data.ya, small_data.weights)
        assert np.all(np.abs(s[:2]) < 1e-9)

    def test_first_order_condition_at_optimum(self):
        spec = sd.ScenarioSpec(k=3, T=64, rho=0.3, phi=0.3, beta0=1.0, beta1=20.0, sigma=0.7, seed=0)
        data = sd.generate(spec)
        config = sd.EstimationConfig(grad_tol=1e-4)
        res = sd.fit(data.Z, data.ya, data.weights, config)
        assert res.converged
        s = sd.score(res.params, data.Z, data.ya, data.weights)
        assert np.max(np.abs(s)) <= config.grad_tol


class TestFit:
    def test_deterministic(self, small_data):
        cfg = sd.EstimationConfig(seed=5)
        a = sd.fit(small_data.Z, small_data.ya, small_data.weights, cfg)
        b = sd.fit(small_data.Z, small_data.ya, small_data.weights, cfg)
        assert_allclose(a.params.theta(), b.params.theta(), rtol=0)
        assert a.loglik == b.loglik

    def test_recovery_single_seed(self):
        spec = sd.ScenarioSpec(k=3, T=96, rho=0.25, phi=0.5, beta0=1.0, beta1=10.0, sigma=0.1, seed=1)
        data = sd.generate(spec)
        res = sd.fit(data.Z, data.ya, data.weights)
        assert res.converged
        assert abs(res.params.rho - 0.25) < 0.15
        assert abs(res.params.beta[1] - 10.0) / 10.0 < 0.05

    def test_no_spurious_spatial_dependence(self):
        """Data generated at rho=0 yields |rho_hat| < 0.2 in most seeds."""
        hits = 0
        for seed in range(20):
            spec = sd.ScenarioSpec(k=3, T=48, rho=0.0, phi=0.25, beta0=1.0, beta1=10.0, sigma=0.5, seed=seed)
            data = sd.generate(spec)
            res = sd.fit(data.Z, data.ya, data.weights, sd.EstimationConfig(seed=seed))
            hits += abs(res.params.rho) < 0.2
        assert hits >= 16

    def test_objective_at_estimate_beats_truth(self):
        spec = sd.ScenarioSpec(k=2, T=32, rho=0.4, phi=0.2, beta0=1.0, beta1=3.0, sigma=0.3, seed=8)
        data = sd.generate(spec)
        res = sd.fit(data.Z, data.ya, data.weights)
        at_hat = sd.concentrated_negloglik(
            res.params.rho, res.params.phi1, res.params.sigma2, data.Z, data.ya, data.weights
        )
        at_truth = sd.concentrated_negloglik(0.4, 0.2, 0.09, data.Z, data.ya, data.weights)
        assert at_hat <= at_truth + 1e-9

    def test_profiling_consistency(self, small_data):
        """A full 5-parameter optimum does not move away from the profiled one."""
        res = sd.fit(small_data.Z, small_data.ya, small_data.weights)
        theta = res.params.theta()

        def full_negloglik(vec):
            p = sd.ModelParams(beta=vec[:2], sigma2=np.exp(vec[2]), phi1=vec[3], rho=vec[4])
            return -sd.loglik(p, small_data.Z, small_data.ya, small_data.weights)

        x0 = np.concatenate([theta[:2], [np.log(theta[2])], theta[3:]])
        bounds = [(None, None)] * 2 + [(np.log(1e-8), 50.0), (-0.99, 0.99), (-0.99, 0.99)]
        direct = minimize(full_negloglik, x0, method="L-BFGS-B", bounds=bounds)
        got = np.concatenate([direct.x[:2], [np.exp(direct.x[2])], direct.x[3:]])
        assert_allclose(got, theta, atol=1e-4)

    def test_standard_errors_positive_when_converged(self):
        spec = sd.ScenarioSpec(k=3, T=64, rho=0.2, phi=0.3, beta0=1.0, beta1=4.0, sigma=0.5, seed=3)
        data = sd.generate(spec)
        res = sd.fit(data.Z, data.ya, data.weights)
        assert res.converged
        assert res.std_errors is not None
        assert np.all(np.isfinite(res.std_errors))
        assert np.all(res.std_errors > 0)

    def test_boundary_warning_near_unit_root(self):
        spec = sd.ScenarioSpec(k=3, T=48, rho=0.97, phi=0.2, beta0=1.0, beta1=8.0, sigma=0.1, seed=0)
        data = sd.generate(spec)
        res = sd.fit(data.Z, data.ya, data.weights)
        if abs(res.params.rho) > 0.95:
            assert any("rho" in w and "boundary" in w for w in res.condition_warnings)

    def test_homogeneous_columns_warn(self):
        w = sd.build_grid_adjacency(2)  # doubly stochastic
        spec = sd.ScenarioSpec(k=2, T=24, rho=0.0, phi=0.1, beta0=1.0, beta1=2.0, sigma=0.5, seed=6)
        data = sd.generate(spec)
        res = sd.fit(data.Z, data.ya, w, sd.EstimationConfig(multistart=2))
        assert any("homogeneous" in msg for msg in res.condition_warnings)

    def test_small_T_warns(self, grid3):
        rng = np.random.default_rng(12)
        T = 4
        Z = np.column_stack([np.ones(9 * T), rng.uniform(size=9 * T)])
        res = sd.fit(Z, rng.normal(size=T) + 9, grid3, sd.EstimationConfig(multistart=1, max_iter=50))
        assert any("small" in msg for msg in res.condition_warnings)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="rho_bounds"):
            sd.EstimationConfig(rho_bounds=(-1.2, 0.9))
        with pytest.raises(ValueError, match="multistart"):
            sd.EstimationConfig(multistart=0)

    def test_trace_records_every_start(self, small_data):
        cfg = sd.EstimationConfig(multistart=3)
        res = sd.fit(small_data.Z, small_data.ya, small_data.weights, cfg)
        assert len(res.optimizer_trace) == 3
        assert all(len(t["iterates"]) > 0 for t in res.optimizer_trace)
