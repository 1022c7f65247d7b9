from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from shapinfer.core_data import Dataset, ShapleyDistribution, enumerate_subsets, sample_shapley_subsets, shapley_weight
from shapinfer.curve import (
    CurveNuisances,
    FitProtocol,
    GaussianZeta,
    fit_shap_curve,
    naive_loss,
    orthogonality_check,
    ortho_loss,
    partial_loss,
)
from shapinfer.gaussian import GaussianCovariateModel
from shapinfer.learners import LearnerConfig, LinearModel, linear_config
from shapinfer.shap import SubsetStrategy, psi_score, shap_curve_mc

from conftest import linear_gaussian

ONE = lambda x, xp, code: np.ones(np.atleast_2d(x).shape[0])
COV3 = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]])


def const(value):
    return lambda rows: np.full(np.atleast_2d(rows).shape[0], float(value))


def bumpy(rows):
    rows = np.atleast_2d(rows)
    return np.tanh(rows[:, 0]) + 0.5 * rows[:, 1] * rows[:, -1]


def direct_partial(code, x, y, xp, phi, mu, zeta, a):
    """Scalar re-implementation of a single partial loss."""
    d = x.size
    mixed = np.array([x[j] if (code >> j) & 1 else xp[j] for j in range(d)])
    sig = 1.0 if (code >> a) & 1 else -1.0
    return ((phi(x[None])[0] / 2 - sig * mu(mixed[None])[0]) ** 2
            - sig * phi(mixed[None])[0] * zeta(x, xp, code)[0] * (y - mu(x[None])[0]))


class TestPartialLoss:
    def test_all_zero(self):
        nus = CurveNuisances(const(0), ONE)
        assert partial_loss(0b1, (np.zeros(1), 0.0), (np.zeros(1), 0.0), const(0), nus, 0) == 0.0

    def test_exact_mu_kills_correction(self, rng):
        mu = LinearModel([1.0, -1.0, 2.0])
        x, xp = rng.normal(size=(2, 3))
        nus = CurveNuisances(mu, lambda *_: np.array([7.3]))
        val = partial_loss(0b011, (x, mu.predict(x)), (xp, None), bumpy, nus, 1)
        mixed = np.array([x[0], x[1], xp[2]])
        assert val == pytest.approx((bumpy(x)[0] / 2 - mu.predict(mixed)) ** 2, abs=1e-12)

    def test_hand_example(self):
        nus = CurveNuisances(const(0.5), ONE)
        assert partial_loss(0b1, (np.zeros(1), 2.0), (np.zeros(1), None), const(1.0), nus, 0) == pytest.approx(-1.5)


class TestOrthoLoss:
    def test_decomposition(self, rng):
        d, a = 4, 2
        mu = lambda r: np.sin(np.atleast_2d(r) @ np.arange(1.0, d + 1))
        zeta = lambda x, xp, code: np.atleast_1d(1.0 + 0.1 * code + 0.05 * np.atleast_2d(x)[:, 0] ** 2)
        nus = CurveNuisances(mu, zeta)
        for _ in range(5):
            x, xp = rng.normal(size=(2, d))
            y = rng.normal()
            direct = 0.0
            for code in enumerate_subsets(d, a):
                w = shapley_weight(d, bin(int(code)).count("1"))
                direct += w * (direct_partial(int(code) | (1 << a), x, y, xp, bumpy, mu, zeta, a)
                               + direct_partial(int(code), x, y, xp, bumpy, mu, zeta, a))
            assert ortho_loss((x, y), (xp, None), bumpy, nus, a) == pytest.approx(direct, abs=1e-10)

    def test_one_dimension(self):
        mu = lambda r: np.atleast_2d(r)[:, 0] ** 2
        phi = lambda r: 3 * np.atleast_2d(r)[:, 0]
        nus = CurveNuisances(mu, ONE)
        x, xp, y = 1.0, 2.0, 0.5
        expected = ((3 / 2 - 1) ** 2 - 3 * (y - 1)) + ((3 / 2 + 4) ** 2 + 6 * (y - 1))
        assert ortho_loss((np.array([x]), y), (np.array([xp]), None), phi, nus, 0) == pytest.approx(expected)

    def test_sampled_matches_exact(self, rng):
        d, a, k = 5, 1, 4096
        model = GaussianCovariateModel(np.zeros(d), 0.5 * np.eye(d) + 0.5)
        nus = CurveNuisances(bumpy, GaussianZeta(model))
        x, xp = rng.normal(size=(2, d))
        y = 0.3
        exact = ortho_loss((x, y), (xp, None), bumpy, nus, a)
        codes = sample_shapley_subsets(ShapleyDistribution(d, a), np.random.default_rng(3), k)
        terms = np.array([partial_loss(int(c) | (1 << a), (x, y), (xp, None), bumpy, nus, a)
                          + partial_loss(int(c), (x, y), (xp, None), bumpy, nus, a) for c in codes])
        sampled = ortho_loss((x, y), (xp, None), bumpy, nus, a, SubsetStrategy("sampled", k),
                             np.random.default_rng(3))
        assert sampled == pytest.approx(terms.mean(), abs=1e-10)
        assert abs(sampled - exact) <= 4 * terms.std(ddof=1) / np.sqrt(k)

    def test_minimizer(self):
        data = linear_gaussian(20000, coef=(1.0, -0.5, 0.8), seed=4, cov=COV3)
        mu = LinearModel([1.0, -0.5, 0.8])
        nus = CurveNuisances(mu, GaussianZeta(GaussianCovariateModel(np.zeros(3), COV3)))
        z, zp = (data.x[:10000], data.y[:10000]), (data.x[10000:], None)
        truth = lambda r: 1.0 * np.atleast_2d(r)[:, 0]
        base = ortho_loss(z, zp, truth, nus, 0).mean()
        for h in (const(1.0), lambda r: np.atleast_2d(r)[:, 1], lambda r: np.atleast_2d(r)[:, 0] ** 2 - 1):
            moved = lambda r, h=h: truth(r) + 0.2 * h(r)
            assert base <= ortho_loss(z, zp, moved, nus, 0).mean()

    def test_pointwise_minimizer_is_curve(self, rng):
        # with a noiseless outcome the loss at x is quadratic in phi(x) with vertex at psi_a averaged over x'
        d, a = 3, 0
        x = np.array([0.4, -1.1, 0.7])
        bg = rng.normal(size=(4000, d))
        nus = CurveNuisances(bumpy, ONE)
        z = (np.tile(x, (bg.shape[0], 1)), np.repeat(bumpy(x), bg.shape[0]))

        def pop(c):
            return ortho_loss(z, (bg, None), const(c), nus, a).mean()

        best = minimize_scalar(pop, bracket=(-2, 2)).x
        oracle, se = shap_curve_mc(bumpy, x, bg, a, bg.shape[0], return_stderr=True)
        assert best == pytest.approx(oracle, abs=max(4 * se, 1e-8))


class TestNaiveLoss:
    def test_perfect_fit(self, rng):
        mu = LinearModel([2.0, 1.0])
        x, xp = rng.normal(size=(2, 2))
        phi = lambda r: np.full(1, psi_score(mu, x, xp, 0))
        assert naive_loss((x, 0.0), (xp, None), phi, mu, 0) == pytest.approx(0.0, abs=1e-14)

    def test_linear_closed_form(self, rng):
        b = np.array([2.0, -1.0, 0.5])
        x, xp = rng.normal(size=(2, 3))
        val = naive_loss((x, 0.0), (xp, None), const(0), LinearModel(b), 2)
        assert val == pytest.approx(0.5 * b[2] ** 2 * (x[2] - xp[2]) ** 2)

    def test_asymmetric(self, rng):
        x, xp = rng.normal(size=(2, 2))
        phi = lambda r: np.atleast_2d(r)[:, 0]
        mu = LinearModel([1.0, 1.0])
        assert naive_loss((x, 0), (xp, 0), phi, mu, 0) != naive_loss((xp, 0), (x, 0), phi, mu, 0)


def analytic_mse(model, coef, a, rng, m=200):
    pts = rng.standard_normal((m, len(coef)))
    return np.mean((model.predict(pts) - coef[a] * pts[:, a]) ** 2)


class TestFit:
    COEF = (1.0, 0.5, 0.0)

    def test_linear_gaussian(self, rng):
        data = linear_gaussian(4000, self.COEF, seed=1)
        model = fit_shap_curve(data, 0, linear_config(), protocol=FitProtocol("split"), rng=rng)
        assert analytic_mse(model, self.COEF, 0, rng) <= 0.05 * self.COEF[0] ** 2

    def test_rff(self, rng):
        data = linear_gaussian(4000, self.COEF, seed=2)
        cfg = LearnerConfig(kind="ridge_rff", n_features=200, ridge=1e-3)
        model = fit_shap_curve(data, 0, cfg, protocol=FitProtocol("reuse"), rng=rng)
        assert analytic_mse(model, self.COEF, 0, rng) <= 0.05 * self.COEF[0] ** 2

    def test_corrupted_mu_majority(self):
        coef = np.array(self.COEF)
        a, wins = 0, 0
        truth = GaussianZeta(GaussianCovariateModel(np.zeros(3), np.eye(3)))
        # unit L2 norm perturbation under the standard normal design
        bad = LinearModel(coef + 0.3 * np.array([1.0, 1.0, 0.0]) / np.sqrt(2))
        cfg = LearnerConfig(kind="ridge_rff", n_features=100, ridge=1e-3)
        for seed in range(10):
            data = linear_gaussian(2000, coef, seed=100 + seed)
            nus = CurveNuisances(bad, truth)
            mse = {}
            for loss in ("naive", "orthogonal"):
                model = fit_shap_curve(data, a, cfg, nus=nus, loss=loss, protocol=FitProtocol("reuse"),
                                       rng=np.random.default_rng(seed))
                mse[loss] = analytic_mse(model, coef, a, np.random.default_rng(999))
            wins += mse["orthogonal"] <= mse["naive"]
        assert wins > 5

    def test_more_data_helps(self):
        cfg = LearnerConfig(kind="ridge_rff", n_features=100, ridge=1e-3)
        mses = {}
        for n in (500, 4000):
            vals = []
            for seed in range(3):
                data = linear_gaussian(n, self.COEF, seed=seed)
                model = fit_shap_curve(data, 0, cfg, protocol=FitProtocol("reuse"), rng=np.random.default_rng(seed))
                vals.append(analytic_mse(model, self.COEF, 0, np.random.default_rng(7)))
            mses[n] = np.mean(vals)
        assert mses[4000] < mses[500]

    def test_feedforward_runs_and_is_seeded(self):
        data = linear_gaussian(300, self.COEF, seed=5)
        cfg = LearnerConfig(kind="feedforward", hidden=(8, 8), epochs=3, batch_size=64)
        diag = {}
        m1 = fit_shap_curve(data, 0, cfg, protocol=FitProtocol("reuse"), rng=np.random.default_rng(1),
                            diagnostics=diag, partners=2)
        m2 = fit_shap_curve(data, 0, cfg, protocol=FitProtocol("reuse"), rng=np.random.default_rng(1), partners=2)
        pts = data.x[:20]
        np.testing.assert_array_equal(m1.predict(pts), m2.predict(pts))
        assert len(diag["loss_trace"]) == 3
        assert diag["n_curve_rows"] == 300

    def test_split_partition(self, rng):
        nuis, curve = FitProtocol("split", 0.5).partition(11, rng)
        assert set(nuis).isdisjoint(curve)
        assert nuis.size + curve.size == 11

    def test_bad_loss(self, rng):
        with pytest.raises(ValueError):
            fit_shap_curve(linear_gaussian(20), 0, linear_config(), loss="huber", rng=rng)

    def test_hessian_psd(self, rng):
        # the loss is quadratic in the coefficients; recover the Hessian by second differences
        d, a = 3, 1
        data = linear_gaussian(400, (0.5, 1.0, -1.0), seed=8, cov=COV3)
        nus = CurveNuisances(LinearModel([0.4, 0.9, -1.2]), GaussianZeta(GaussianCovariateModel(np.zeros(d), COV3)))
        xp = data.x[rng.permutation(data.n)]

        def risk(theta):
            phi = LinearModel(theta[1:], theta[0])
            return ortho_loss((data.x, data.y), (xp, None), phi, nus, a).mean()

        k = d + 1
        eye = np.eye(k)
        base = rng.normal(size=k)
        hess = np.array([[(risk(base + eye[i] + eye[j]) - risk(base + eye[i]) - risk(base + eye[j]) + risk(base))
                          for j in range(k)] for i in range(k)])
        assert np.linalg.eigvalsh(0.5 * (hess + hess.T)).min() >= -1e-10


class TestOrthogonalityCheck:
    COEF = np.array([1.0, -0.5, 0.8])

    def sampler(self, m, rng):
        x = rng.standard_normal((m, 3)) @ np.linalg.cholesky(COV3).T
        return Dataset(x, x @ self.COEF + 0.5 * rng.standard_normal(m))

    def setup_method(self):
        self.nus = CurveNuisances(LinearModel(self.COEF), GaussianZeta(GaussianCovariateModel(np.zeros(3), COV3)))
        self.phi = LinearModel([1.0, 0.0, 0.0])
        self.dphi = lambda r: np.atleast_2d(r)[:, 0]
        self.dmu = lambda r: np.atleast_2d(r)[:, 0] + 0.5 * np.atleast_2d(r)[:, 1] ** 2

    def test_orthogonal(self):
        est, se = orthogonality_check(self.phi, self.nus, 0, self.dphi, self.dmu, mc_pairs=20000,
                                      rng=np.random.default_rng(1), sampler=self.sampler)
        assert abs(est) <= 4 * se

    def test_naive_detectable(self):
        est, se = orthogonality_check(self.phi, self.nus, 0, self.dphi, self.dmu, mc_pairs=20000,
                                      rng=np.random.default_rng(1), sampler=self.sampler, loss="naive")
        assert abs(est) > 4 * se

    @pytest.mark.parametrize("loss", ["naive", "orthogonal"])
    def test_zeta_only(self, loss):
        dzeta = lambda x, xp, code: 0.3 * np.tanh(np.atleast_2d(x)[:, 1])
        est, se = orthogonality_check(self.phi, self.nus, 0, self.dphi, const(0), dzeta, mc_pairs=20000,
                                      rng=np.random.default_rng(2), sampler=self.sampler, loss=loss)
        assert abs(est) <= 4 * se + 1e-12
