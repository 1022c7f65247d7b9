from collections import Counter

import numpy as np
import pytest

from shapinfer.gaussian import (
    RATIO_MAX,
    GaussianCovariateModel,
    ModelError,
    conditional_sample,
    fit_gaussian,
    log_omega_s,
    omega_s,
    random_covariance,
    zeta_s,
)


def bivariate(rho):
    return GaussianCovariateModel(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))


def correlated(d, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianCovariateModel(rng.normal(size=d) * 0.3, random_covariance(d, 0.6, rng))


class TestFit:
    def test_hand_covariance(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        model = fit_gaussian(x, jitter=0.0)
        np.testing.assert_allclose(model.mean, [1, 1])
        np.testing.assert_allclose(model.cov, np.diag([4 / 3, 4 / 3]), atol=1e-12)

    def test_default_jitter(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        model = fit_gaussian(x)
        np.testing.assert_allclose(np.diag(model.cov), 4 / 3 + 1e-6 * 4 / 3, rtol=1e-12)

    def test_recovers_identity(self, rng):
        model = fit_gaussian(rng.standard_normal((1000, 2)))
        np.testing.assert_allclose(model.cov, np.eye(2), atol=0.15)

    def test_constant_column_needs_jitter(self, rng):
        x = np.column_stack([rng.standard_normal(50), np.full(50, 3.0)])
        with pytest.raises(ModelError):
            GaussianCovariateModel(x.mean(axis=0), np.cov(x, rowvar=False))
        model = fit_gaussian(x)
        assert model.cov[1, 1] == pytest.approx(model.jitter, rel=1e-12)
        assert model.jitter > 0

    def test_chol_reproduces_cov(self):
        model = correlated(5)
        np.testing.assert_allclose(model.chol @ model.chol.T, model.cov, atol=1e-8)

    def test_json_round_trip(self):
        model = correlated(4)
        again = GaussianCovariateModel.from_json(model.to_json())
        np.testing.assert_array_equal(again.cov, model.cov)
        np.testing.assert_array_equal(again.mean, model.mean)


class TestRandomCovariance:
    def test_eigenvalues_in_band(self, rng):
        for _ in range(20):
            sigma = random_covariance(5, 0.6, rng)
            eig = np.linalg.eigvalsh(sigma)
            assert eig.min() >= 0.4 - 1e-12 and eig.max() <= 1.6 + 1e-12
            np.testing.assert_allclose(sigma, sigma.T, atol=1e-12)

    def test_tiny_spread_is_identity(self, rng):
        np.testing.assert_allclose(random_covariance(4, 1e-12, rng), np.eye(4), atol=1e-10)

    def test_bad_spread(self, rng):
        with pytest.raises(ValueError):
            random_covariance(3, 1.0, rng)


class TestRatios:
    def test_identity_cov_gives_one(self, rng):
        model = GaussianCovariateModel(np.zeros(4), np.eye(4))
        x, xp = rng.normal(size=(2, 30, 4)) * 2
        for code in range(16):
            np.testing.assert_allclose(omega_s(model, x, code), 1.0, atol=1e-10)
            np.testing.assert_allclose(zeta_s(model, x, xp, code), 1.0, atol=1e-10)

    def test_bivariate_omega(self):
        # p_0(0) p_1(0) / p(0, 0) = (1/2pi) / (1/(2pi sqrt(1 - rho^2)))
        assert omega_s(bivariate(0.5), np.zeros(2), 0b01) == pytest.approx(np.sqrt(0.75), abs=1e-10)

    def test_trivial_subsets(self, rng):
        model = correlated(3)
        x, xp = rng.normal(size=(2, 10, 3))
        for code in (0, 0b111):
            np.testing.assert_allclose(omega_s(model, x, code), 1.0)
            np.testing.assert_allclose(zeta_s(model, x, xp, code), 1.0, atol=1e-12)

    def test_log_domain_consistency(self, rng):
        model = correlated(5)
        x = rng.normal(size=(40, 5))
        for code in (0b00101, 0b11010, 0b01000):
            mask = np.array([(code >> i) & 1 for i in range(5)], dtype=bool)
            direct = model.log_density(x, mask) + model.log_density(x, ~mask) - model.log_density(x)
            np.testing.assert_allclose(log_omega_s(model, x, code), direct, atol=1e-10)

    def test_positive_finite_on_box(self, rng):
        model = correlated(4)
        x, xp = rng.uniform(-3, 3, size=(2, 500, 4))
        for code in range(16):
            z = zeta_s(model, x, xp, code)
            assert np.all(np.isfinite(z)) and np.all(z > 0)

    def test_clamp_counted(self):
        model = bivariate(0.999)
        diag = Counter()
        val = zeta_s(model, np.array([[5.0, -5.0]]), np.array([[-5.0, 5.0]]), 0b01, diag)
        assert val[0] == pytest.approx(RATIO_MAX)
        assert diag["ratio_clamps"] == 1

    def test_reweighting_identity(self, rng):
        # E[f(X) g(X_S, X'_-S)] = E[f(X_S, X'_-S) zeta^S(X, X') g(X)]
        model = GaussianCovariateModel(np.zeros(3), np.array([[1.0, 0.4, 0.2], [0.4, 1.0, -0.3], [0.2, -0.3, 1.0]]))
        m = 100_000
        x, xp = model.sample(m, rng), model.sample(m, rng)
        f = lambda v: v[:, 0] + 0.5 * v[:, 1] * v[:, 2]
        g = lambda v: 1.0 + v[:, 1] - 0.3 * v[:, 0] ** 2
        for code in (0b001, 0b011, 0b100):
            mask = np.array([(code >> i) & 1 for i in range(3)], dtype=bool)
            mixed = np.where(mask, x, xp)
            lhs = f(x) * g(mixed)
            rhs = f(mixed) * zeta_s(model, x, xp, code) * g(x)
            se = np.sqrt(lhs.var() / m + rhs.var() / m)
            assert abs(lhs.mean() - rhs.mean()) <= 4 * se


class TestConditionalSample:
    def test_identity_is_marginal(self, rng):
        model = GaussianCovariateModel(np.array([1.0, -2.0, 0.5]), np.eye(3))
        draws = conditional_sample(model, 0b001, np.array([4.0]), 10_000, rng)
        se = draws.std(axis=0) / 100
        assert np.all(np.abs(draws.mean(axis=0) - [-2.0, 0.5]) <= 4 * se)

    def test_bivariate_moments(self, rng):
        k = 20_000
        draws = conditional_sample(bivariate(0.5), 0b01, np.array([2.0]), k, rng)[:, 0]
        assert abs(draws.mean() - 1.0) <= 4 * np.sqrt(0.75 / k)
        assert draws.var() == pytest.approx(0.75, abs=0.03)

    def test_reproduces_joint(self, rng):
        model = correlated(4, seed=3)
        m = 20_000
        full = model.sample(m, rng)
        mask = np.array([True, False, True, False])
        draws = conditional_sample(model, mask, full[:, mask], 1, rng)[:, 0, :]
        joint = np.empty_like(full)
        joint[:, mask] = full[:, mask]
        joint[:, ~mask] = draws
        np.testing.assert_allclose(np.cov(joint, rowvar=False), model.cov, atol=0.05)

    def test_batched_and_shared_base(self, rng):
        model = correlated(3)
        base = rng.standard_normal((8, 2))
        out = conditional_sample(model, 0b010, np.array([[0.1], [0.7]]), 8, rng, base=base)
        assert out.shape == (2, 8, 2)
        single = conditional_sample(model, 0b010, np.array([0.7]), 8, rng, base=base)
        np.testing.assert_allclose(out[1], single)

    def test_full_subset_rejected(self, rng):
        with pytest.raises(ValueError):
            conditional_sample(correlated(2), 0b11, np.zeros(2), 3, rng)
