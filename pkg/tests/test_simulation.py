import numpy as np
import pytest
from scipy.special import expit

from shapinfer.gaussian import GaussianCovariateModel
from shapinfer.learners import LearnerConfig
from shapinfer.shap import SubsetStrategy, shap_curve_mc
from shapinfer.simulation import (
    CSV_COLUMNS,
    D,
    aggregate,
    nonlinear_target,
    cell_seed,
    f_star,
    generate_run,
    grid_to_csv,
    linear_gaussian_target,
    run_coverage_study,
    run_curve_experiment,
)

TINY = LearnerConfig(kind="ridge_rff", n_features=50, ridge=1e-2)


class TestFStar:
    def test_origin(self):
        assert f_star(np.zeros(5)) == pytest.approx(4.8, abs=1e-12)

    def test_sigmoid_term(self, rng):
        x = rng.normal(size=5)
        x[2] = x[0]
        x1, x2, x3 = x[:3]
        rest = (4.5 * np.sin(1.2 * x1) + 3.7 * np.cos(0.8 * x2 * x3) + 2.0 * x1 * x2 - 0.9 * np.tanh(x3)
                + 0.6 * np.exp(-0.5 * x2 ** 2))
        assert f_star(x) - rest == pytest.approx(0.5, abs=1e-12)
        assert expit(0.0) == 0.5

    def test_finite_on_box(self, rng):
        assert np.isfinite(f_star(rng.uniform(-3, 3, size=(10_000, 5)))).all()

    def test_length_check(self):
        with pytest.raises(ValueError):
            f_star(np.zeros(4))


class TestGenerateRun:
    def test_deterministic(self):
        d1, r1 = generate_run(3, 100, oracle_m=200)
        d2, r2 = generate_run(3, 100, oracle_m=200)
        np.testing.assert_array_equal(d1.x, d2.x)
        np.testing.assert_array_equal(d1.y, d2.y)
        np.testing.assert_array_equal(r1.oracle_shap, r2.oracle_shap)
        assert r1.eval_points.shape == (200, D)

    def test_design_shared_across_n(self):
        _, r1 = generate_run(4, 50, oracle_m=200)
        _, r2 = generate_run(4, 80, oracle_m=200)
        np.testing.assert_array_equal(r1.sigma, r2.sigma)
        np.testing.assert_array_equal(r1.eval_points, r2.eval_points)

    def test_moments(self):
        data, run = generate_run(1, 100_000, oracle_m=200)
        np.testing.assert_allclose(np.cov(data.x, rowvar=False), run.sigma, atol=0.05)
        assert np.std(data.y - f_star(data.x), ddof=1) == pytest.approx(0.5, abs=0.02)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_run(0, 1)

    @pytest.mark.slow
    def test_oracle_stable_when_doubling_m(self):
        _, run = generate_run(0, 10)
        bg = GaussianCovariateModel(np.zeros(D), run.sigma).sample(24_000, np.random.default_rng(5))
        half, se = shap_curve_mc(f_star, run.eval_points, bg[:12_000], 1, 12_000, SubsetStrategy("exact"),
                                 return_stderr=True)
        full = shap_curve_mc(f_star, run.eval_points, bg, 1, 24_000, SubsetStrategy("exact"))
        assert np.all(np.abs(full - half) < se)


class TestCurveGrid:
    def test_rows_and_csv(self, tmp_path):
        out = tmp_path / "grid.csv"
        rows = run_curve_experiment([60, 80], 2, out_path=out, learner=TINY, oracle_m=100)
        assert len(rows) == 2 * 2 * 4
        lines = out.read_text().strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 17
        assert all(np.isfinite(r["mse"]) and r["mse"] >= 0 for r in rows)

    def test_jobs_do_not_change_output(self):
        a = run_curve_experiment([60], 2, learner=TINY, oracle_m=100, jobs=1)
        b = run_curve_experiment([60], 2, learner=TINY, oracle_m=100, jobs=2)
        assert grid_to_csv(a) == grid_to_csv(b)

    def test_failed_cell_recorded(self):
        rows = run_curve_experiment([2], 1, methods=[("naive", "split")], learner=TINY, oracle_m=50)
        assert np.isnan(rows[0]["mse"]) and rows[0]["error"]
        assert aggregate(rows) == {}

    def test_aggregate(self):
        rows = [{"n": 5, "method": "naive", "protocol": "split", "mse": v} for v in (1.0, 2.0, 3.0)]
        agg = aggregate(rows)[(5, "naive", "split")]
        assert agg["mean"] == 2.0 and agg["count"] == 3
        assert agg["stderr"] == pytest.approx(1 / np.sqrt(3))

    def test_cell_seed_independent_of_order(self):
        a = cell_seed(0, 500, ("naive", "split"), 1).generate_state(2)
        b = cell_seed(0, 500, ("naive", "split"), 1).generate_state(2)
        c = cell_seed(0, 500, ("orthogonal", "split"), 1).generate_state(2)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            run_curve_experiment([], 1)
        with pytest.raises(ValueError):
            run_curve_experiment([50], 1, methods=[("naive", "cross")])


class TestCoverage:
    def test_targets(self):
        assert linear_gaussian_target(2.0, 0) == pytest.approx(1.0)
        assert linear_gaussian_target(1.0, 0) == pytest.approx(np.sqrt(2 / np.pi))
        assert linear_gaussian_target(2.0, 1) == pytest.approx(0.25)
        assert linear_gaussian_target(1.0, 2) == 0.0

    def test_half_level(self):
        report = run_coverage_study("linear", p=2.0, a=0, n=400, reps=200, alpha_level=0.5)
        # binomial sd at 200 reps is about 0.035
        assert abs(report["coverage"] - 0.5) <= 4 * np.sqrt(0.25 / 200)
        assert report["reps"] == 200 and report["failed"] == 0

    def test_deterministic_across_jobs(self):
        a = run_coverage_study("linear", p=2.0, n=200, reps=6, jobs=1)
        b = run_coverage_study("linear", p=2.0, n=200, reps=6, jobs=2)
        assert a == b
        assert 0.0 <= a["coverage"] <= 1.0

    def test_nonlinear_target_has_stderr(self):
        info = nonlinear_target(2.0, m=500, background=200)
        assert info["value"] > 0 and info["stderr"] > 0

    def test_unknown_dgp(self):
        with pytest.raises(ValueError):
            run_coverage_study("poisson", reps=1)
