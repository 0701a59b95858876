"""Tests for the comparator estimators: stacked mixed-model GLS with its
exact moments, the variance-ratio profiler, and plain ridge.

The GLS solver is checked against a fully dense construction of the
weighting matrix, the moment formulas against Monte Carlo simulation of
the generating mixed model, and the profiler against data simulated at
known variance ratios.
"""

import numpy as np
import pytest
from scipy import optimize

from ridge_relay import (
    Batch,
    MixedFit,
    SingularMatrixError,
    StackedData,
    ValidationError,
    default_xi_grid,
    estimate_xi,
    fit_targeted_ridge,
    mixed_fixed_effects,
    mixed_moments,
    plain_ridge,
    stack_batches,
)


def random_batches(rng, t, n, p, coef, noise_sd=1.0, effect_sd=0.0):
    names = tuple(f"x{j}" for j in range(p))
    batches = []
    for idx in range(1, t + 1):
        X = rng.standard_normal((n, p))
        slope = coef + effect_sd * rng.standard_normal(p)
        y = X @ slope + noise_sd * rng.standard_normal(n)
        batches.append(Batch(t=idx, X=X, y=y, covariates=names))
    return batches


def dense_gls(data, xi):
    """GLS fixed effects via an explicit dense weighting-matrix inverse."""
    Z = data.z_block
    omega = xi * (Z @ Z.T) + np.eye(data.n)
    w = np.linalg.inv(omega)
    xtw = data.x_stack.T @ w
    return np.linalg.solve(xtw @ data.x_stack, xtw @ data.y_stack)


class TestStackedData:
    def test_block_diagonal_layout(self):
        rng = np.random.default_rng(101)
        batches = random_batches(rng, 3, 4, 2, np.zeros(2))
        data = stack_batches(batches)
        Z = data.z_block
        assert Z.shape == (12, 6)
        for tau, (start, stop) in enumerate(data.batch_boundaries):
            block = Z[start:stop, 2 * tau:2 * (tau + 1)]
            np.testing.assert_array_equal(block, batches[tau].X)
            outside = Z[start:stop].copy()
            outside[:, 2 * tau:2 * (tau + 1)] = 0.0
            assert np.all(outside == 0.0)

    def test_stacking_preserves_rows_in_order(self):
        rng = np.random.default_rng(102)
        batches = random_batches(rng, 2, 3, 2, np.ones(2))
        data = stack_batches(batches)
        np.testing.assert_array_equal(data.x_stack, np.vstack([b.X for b in batches]))
        np.testing.assert_array_equal(data.y_stack,
                                      np.concatenate([b.y for b in batches]))
        assert data.n == 6 and data.p == 2 and data.n_batches == 2

    def test_boundaries_must_tile_the_rows(self):
        rng = np.random.default_rng(103)
        with pytest.raises(ValidationError):
            StackedData(y_stack=rng.standard_normal(4),
                        x_stack=rng.standard_normal((4, 1)),
                        batch_boundaries=((0, 2), (3, 4)))
        with pytest.raises(ValidationError):
            StackedData(y_stack=rng.standard_normal(4),
                        x_stack=rng.standard_normal((4, 1)),
                        batch_boundaries=((0, 2), (2, 2), (2, 4)))

    def test_mixed_family_stacking_rejected(self):
        a = Batch(t=1, X=np.ones((2, 1)), y=np.ones(2), covariates=("a",))
        b = Batch(t=2, X=np.ones((2, 1)), y=np.array([0.0, 1.0]),
                  covariates=("a",), family="logistic")
        with pytest.raises(ValidationError):
            stack_batches([a, b])


class TestMixedFixedEffects:
    def test_zero_ratio_is_pooled_least_squares(self):
        rng = np.random.default_rng(104)
        data = stack_batches(random_batches(rng, 3, 6, 2, np.array([1.0, -1.0])))
        pooled = np.linalg.lstsq(data.x_stack, data.y_stack, rcond=None)[0]
        np.testing.assert_allclose(mixed_fixed_effects(data, 0.0), pooled,
                                   atol=1e-10)

    def test_single_orthonormal_batch_by_hand(self):
        """One batch with orthonormal columns: the correlation induced by
        the batch effect cancels and the estimator is X'y for every ratio."""
        rng = np.random.default_rng(105)
        Q, _ = np.linalg.qr(rng.standard_normal((5, 2)))
        y = rng.standard_normal(5)
        batch = Batch(t=1, X=Q, y=y, covariates=("a", "b"))
        data = stack_batches([batch])
        for xi in (0.5, 1.0, 7.0):
            np.testing.assert_allclose(mixed_fixed_effects(data, xi), Q.T @ y,
                                       atol=1e-10)

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(106)
        for trial in range(5):
            t = int(rng.integers(2, 5))
            n = int(rng.integers(4, 9))
            p = int(rng.integers(1, 4))
            data = stack_batches(random_batches(rng, t, n, p,
                                                rng.standard_normal(p),
                                                effect_sd=0.5))
            xi = float(rng.choice([0.1, 1.0, 10.0]))
            oracle = dense_gls(data, xi)
            np.testing.assert_allclose(mixed_fixed_effects(data, xi), oracle,
                                       atol=1e-8)

    def test_solver_paths_agree(self):
        """The compressed per-batch path and the direct dense path give the
        same estimator regardless of which side of the size rule the
        instance falls on."""
        rng = np.random.default_rng(107)
        for t, n, p in ((2, 10, 2), (4, 3, 3), (3, 5, 4)):
            data = stack_batches(random_batches(rng, t, n, p,
                                                rng.standard_normal(p),
                                                effect_sd=1.0))
            a = mixed_fixed_effects(data, 2.0, method="woodbury")
            b = mixed_fixed_effects(data, 2.0, method="direct")
            c = mixed_fixed_effects(data, 2.0)
            np.testing.assert_allclose(a, b, atol=1e-8)
            np.testing.assert_allclose(c, a, atol=1e-8)

    def test_underdetermined_stack_raises(self):
        rng = np.random.default_rng(108)
        X = rng.standard_normal((2, 3))
        batch = Batch(t=1, X=X, y=rng.standard_normal(2),
                      covariates=("a", "b", "c"))
        with pytest.raises(SingularMatrixError):
            mixed_fixed_effects(stack_batches([batch]), 1.0)

    def test_negative_ratio_rejected(self):
        rng = np.random.default_rng(109)
        data = stack_batches(random_batches(rng, 2, 5, 2, np.zeros(2)))
        with pytest.raises(ValidationError):
            mixed_fixed_effects(data, -0.5)


class TestMixedMoments:
    def test_mean_equals_generating_coefficients(self):
        rng = np.random.default_rng(111)
        for _ in range(8):
            t = int(rng.integers(1, 5))
            p = int(rng.integers(1, 4))
            coef = rng.standard_normal(p)
            data = stack_batches(random_batches(rng, t, 8, p, coef))
            xi = float(rng.choice([0.0, 0.3, 5.0]))
            report = mixed_moments(data, xi, 1.0, 0.7, coef)
            np.testing.assert_allclose(report.mean, coef, atol=1e-10)

    def test_no_batch_effects_at_zero_ratio_gives_ols_variance(self):
        rng = np.random.default_rng(112)
        coef = np.array([1.0, 2.0])
        data = stack_batches(random_batches(rng, 3, 7, 2, coef))
        sigma_eps = 1.9
        report = mixed_moments(data, 0.0, sigma_eps, 0.0, coef)
        ols_cov = sigma_eps * np.linalg.inv(data.x_stack.T @ data.x_stack)
        np.testing.assert_allclose(report.covariance, ols_cov, atol=1e-10)

    def test_monte_carlo_agreement_at_matched_ratio(self):
        """Simulating the mixed model and applying an independently built
        dense estimator map reproduces the covariance formula."""
        rng = np.random.default_rng(113)
        t, n, p = 3, 8, 2
        coef = np.array([1.0, -0.5])
        sigma_eps_sq, sigma_gamma_sq = 1.0, 0.5
        xi = sigma_gamma_sq / sigma_eps_sq
        data = stack_batches(random_batches(rng, t, n, p, coef))
        report = mixed_moments(data, xi, sigma_eps_sq, sigma_gamma_sq, coef)

        Z = data.z_block
        omega = xi * (Z @ Z.T) + np.eye(data.n)
        w = np.linalg.inv(omega)
        xtw = data.x_stack.T @ w
        est_map = np.linalg.solve(xtw @ data.x_stack, xtw)

        reps = 20000
        gammas = np.sqrt(sigma_gamma_sq) * rng.standard_normal((reps, t * p))
        noise = np.sqrt(sigma_eps_sq) * rng.standard_normal((reps, data.n))
        responses = data.x_stack @ coef + gammas @ Z.T + noise
        draws = responses @ est_map.T

        cov = report.covariance
        se_mean = np.sqrt(np.diag(cov) / reps)
        assert np.max(np.abs(draws.mean(axis=0) - report.mean) / se_mean) < 3.0
        sample_cov = np.cov(draws, rowvar=False)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2)
                         / (reps - 1))
        assert np.max(np.abs(sample_cov - cov) / se_cov) < 3.0

    def test_monte_carlo_agreement_at_mismatched_ratio(self):
        """The sandwich form stays exact when the estimator's ratio differs
        from the generating one."""
        rng = np.random.default_rng(114)
        t, n, p = 2, 9, 2
        coef = np.array([0.5, 1.5])
        sigma_eps_sq, sigma_gamma_sq = 1.0, 2.0
        xi = 0.1
        data = stack_batches(random_batches(rng, t, n, p, coef))
        report = mixed_moments(data, xi, sigma_eps_sq, sigma_gamma_sq, coef)

        Z = data.z_block
        omega = xi * (Z @ Z.T) + np.eye(data.n)
        w = np.linalg.inv(omega)
        xtw = data.x_stack.T @ w
        est_map = np.linalg.solve(xtw @ data.x_stack, xtw)

        reps = 8000
        gammas = np.sqrt(sigma_gamma_sq) * rng.standard_normal((reps, t * p))
        noise = np.sqrt(sigma_eps_sq) * rng.standard_normal((reps, data.n))
        draws = (data.x_stack @ coef + gammas @ Z.T + noise) @ est_map.T

        cov = report.covariance
        sample_cov = np.cov(draws, rowvar=False)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2)
                         / (reps - 1))
        assert np.max(np.abs(sample_cov - cov) / se_cov) < 4.0

    def test_moment_validation(self):
        rng = np.random.default_rng(115)
        data = stack_batches(random_batches(rng, 2, 5, 2, np.zeros(2)))
        with pytest.raises(ValidationError):
            mixed_moments(data, 1.0, -1.0, 0.0, np.zeros(2))
        with pytest.raises(ValidationError):
            mixed_moments(data, 1.0, 1.0, 0.0, np.zeros(3))


class TestEstimateXi:
    def test_single_grid_point_is_returned(self):
        rng = np.random.default_rng(116)
        data = stack_batches(random_batches(rng, 3, 10, 2, np.ones(2)))
        fit = estimate_xi(data, grid=(0.7,))
        assert isinstance(fit, MixedFit)
        assert fit.xi == 0.7
        assert fit.sigma_eps_sq > 0
        np.testing.assert_allclose(fit.sigma_gamma_sq, 0.7 * fit.sigma_eps_sq,
                                   rtol=1e-12)
        np.testing.assert_allclose(fit.fixed_effects,
                                   mixed_fixed_effects(data, 0.7), atol=1e-12)

    def test_no_batch_effects_pick_the_smallest_ratios(self):
        """Without real batch effects the profiled likelihood should favor
        the bottom of the ratio grid nearly always."""
        rng = np.random.default_rng(117)
        grid = default_xi_grid(9)
        hits = 0
        reps = 100
        for _ in range(reps):
            coef = rng.standard_normal(2)
            data = stack_batches(random_batches(rng, 6, 30, 2, coef,
                                                noise_sd=1.0, effect_sd=0.0))
            fit = estimate_xi(data, grid=grid)
            hits += fit.xi <= grid[2]
        assert hits >= 90

    def test_strong_batch_effects_push_the_ratio_up(self):
        rng = np.random.default_rng(118)
        grid = default_xi_grid(9)
        hits = 0
        reps = 100
        for _ in range(reps):
            coef = rng.standard_normal(2)
            data = stack_batches(random_batches(rng, 4, 30, 2, coef,
                                                noise_sd=1.0, effect_sd=5.0))
            fit = estimate_xi(data, grid=grid)
            hits += fit.xi > 1.0
        assert hits >= 90

    def test_default_grid_spans_the_documented_range(self):
        grid = default_xi_grid()
        assert len(grid) == 25
        np.testing.assert_allclose(grid[0], 1e-4)
        np.testing.assert_allclose(grid[-1], 1e4)


class TestPlainRidge:
    def test_equals_zero_target_fit(self):
        rng = np.random.default_rng(119)
        X = rng.standard_normal((10, 3))
        y = rng.standard_normal(10)
        a = plain_ridge(X, y, 1.7)
        b = fit_targeted_ridge(X, y, 1.7, np.zeros(3))
        np.testing.assert_array_equal(a.coef, b.coef)
        assert a.residual_sse == b.residual_sse

    def test_infinite_penalty_returns_zero(self):
        rng = np.random.default_rng(120)
        X = rng.standard_normal((8, 2))
        y = rng.standard_normal(8) + 5.0
        np.testing.assert_allclose(plain_ridge(X, y, 1e12).coef, np.zeros(2),
                                   atol=1e-9)

    def test_matches_brute_force_minimizer(self):
        rng = np.random.default_rng(121)
        X = rng.standard_normal((9, 3))
        y = rng.standard_normal(9)
        lam = 0.6

        def objective(beta):
            resid = y - X @ beta
            return resid @ resid + lam * (beta @ beta)

        reference = optimize.minimize(objective, np.zeros(3), method="BFGS",
                                      options={"gtol": 1e-12}).x
        np.testing.assert_allclose(plain_ridge(X, y, lam).coef, reference,
                                   atol=1e-6)
