"""Synthetic benchmarks: the five-covariate nonlinear design, SHAP-curve
accuracy grids, and confidence-interval coverage studies."""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .core_data import Dataset
from .curve import FitProtocol, fit_shap_curve
from .gaussian import GaussianCovariateModel, random_covariance
from .inference import EstimationError, PowerConfig, estimate_power, linear_power_config
from .learners import LearnerConfig
from .shap import SubsetStrategy, shap_curve_mc

log = logging.getLogger(__name__)

D = 5
SPREAD = 0.6
NOISE_SD = 0.5
N_EVAL = 200
ORACLE_M = 12_000
TARGET = 1
FULL_N_GRID = (500, 1000, 2000, 4000, 6000, 8000, 10000, 15000, 20000)
METHODS = (("naive", "split"), ("naive", "reuse"), ("orthogonal", "split"), ("orthogonal", "reuse"))
CSV_COLUMNS = ("run_id", "n", "seed", "method", "protocol", "mse", "runtime_s")

# default curve/nuisance learner for the nonlinear design
BENCHMARK_LEARNER = LearnerConfig(kind="feedforward", hidden=(128, 128, 128), learning_rate=1e-3,
                                 weight_decay=1e-4, epochs=60, batch_size=128)


def f_star(x):
    """Nonlinear regression function of the five-covariate design (1-based names x1..x5)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != D:
        raise ValueError(f"f_star takes {D} coordinates, got {x.shape[-1]}")
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    out = (4.5 * np.sin(1.2 * x1) + 3.7 * np.cos(0.8 * x2 * x3) + 2.0 * x1 * x2 - 0.9 * np.tanh(x3)
           + 0.6 * np.exp(-0.5 * x2 ** 2) + expit(1.5 * (x1 - x3)))
    return float(out) if out.ndim == 0 else out


@dataclass
class SyntheticRun:
    seed: int
    sigma: np.ndarray
    eval_points: np.ndarray
    oracle_shap: np.ndarray
    oracle_stderr: np.ndarray
    target: int = TARGET
    noise_sd: float = NOISE_SD
    d: int = D

    @property
    def covariates(self) -> GaussianCovariateModel:
        return GaussianCovariateModel(np.zeros(self.d), self.sigma)


def _streams(seed: int):
    # covariance, evaluation set, oracle background, and the per-n data stream
    return np.random.SeedSequence([int(seed), 0xA11CE]).spawn(4)


@functools.lru_cache(maxsize=8)
def _design(seed: int, oracle_m: int):
    ss_cov, ss_eval, ss_oracle, _ = _streams(seed)
    sigma = random_covariance(D, SPREAD, np.random.default_rng(ss_cov))
    model = GaussianCovariateModel(np.zeros(D), sigma)
    eval_points = model.sample(N_EVAL, np.random.default_rng(ss_eval))
    oracle, stderr = oracle_curve(eval_points, sigma, oracle_m, np.random.default_rng(ss_oracle))
    return sigma, eval_points, oracle, stderr


def oracle_curve(points, sigma, m: int = ORACLE_M, rng: np.random.Generator | None = None, a: int = TARGET):
    """High-accuracy SHAP curve of ``f_star`` with fresh ``N(0, sigma)`` background draws."""
    rng = rng if rng is not None else np.random.default_rng()
    background = GaussianCovariateModel(np.zeros(D), sigma).sample(m, rng)
    return shap_curve_mc(f_star, points, background, a, m, SubsetStrategy("exact"), rng, return_stderr=True)


def generate_run(seed: int, n: int, oracle_m: int = ORACLE_M) -> tuple[Dataset, SyntheticRun]:
    """Covariance, evaluation set and oracle depend on ``seed`` only; the sample on ``(seed, n)``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    sigma, eval_points, oracle, stderr = _design(int(seed), int(oracle_m))
    data_ss = np.random.SeedSequence([int(seed), 0xA11CE, 3, int(n)])
    rng = np.random.default_rng(data_ss)
    x = GaussianCovariateModel(np.zeros(D), sigma).sample(n, rng)
    y = f_star(x) + NOISE_SD * rng.standard_normal(n)
    run = SyntheticRun(int(seed), sigma.copy(), eval_points.copy(), oracle.copy(), stderr.copy())
    return Dataset(x, y), run


# ---------------------------------------------------------------------------
# curve-accuracy grid


def cell_seed(master_seed: int, n: int, method: tuple[str, str], seed_index: int) -> np.random.SeedSequence:
    """Independent stream per grid cell, free of insertion order."""
    code = METHODS.index(tuple(method))
    return np.random.SeedSequence([int(master_seed), int(n), code, int(seed_index)])


def _run_cell(args):
    n, seed_index, method, master_seed, learner, mu_learner, oracle_m, pairs_per_row = args
    loss, protocol = method
    start = time.perf_counter()
    try:
        data, run = generate_run(seed_index, n, oracle_m)
        rng = np.random.default_rng(cell_seed(master_seed, n, method, seed_index))
        phi = fit_shap_curve(data, run.target, learner, None, loss, FitProtocol(protocol),
                             SubsetStrategy("exact"), rng, mu_cfg=mu_learner, pairs_per_row=pairs_per_row)
        mse = float(np.mean((phi.predict(run.eval_points) - run.oracle_shap) ** 2))
        error = None
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        mse, error = float("nan"), f"{type(exc).__name__}: {exc}"
        log.error("cell n=%d seed=%d %s/%s failed: %s", n, seed_index, loss, protocol, error)
    return {"n": n, "seed": seed_index, "method": loss, "protocol": protocol, "mse": mse,
            "runtime_s": time.perf_counter() - start, "error": error}


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_curve_experiment(n_grid, seeds, methods=METHODS, out_path=None, learner: LearnerConfig = BENCHMARK_LEARNER,
                         mu_learner: LearnerConfig | None = None, master_seed: int = 0, jobs: int = 1,
                         record_runtime: bool = False, oracle_m: int = ORACLE_M, pairs_per_row: int = 1):
    """Fit the SHAP curve for every ``(n, seed, method)`` cell and score it against the oracle.

    ``seeds`` is a count or an iterable of seed indices. Returns the list of
    row dicts (in grid order) and writes the CSV when ``out_path`` is given.
    Runtimes are measured but only written when ``record_runtime`` is set so
    reruns produce identical files.
    """
    n_grid = [int(n) for n in n_grid]
    seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    methods = [tuple(m) for m in methods]
    if not n_grid or not seeds or not methods:
        raise ValueError("empty experiment grid")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m}")
    cells = [(n, s, m, master_seed, learner, mu_learner, oracle_m, pairs_per_row)
             for n in n_grid for s in seeds for m in methods]
    rows = _map(_run_cell, cells, jobs)
    for i, row in enumerate(rows):
        row["run_id"] = i
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            fh.write(grid_to_csv(rows, record_runtime))
    return rows


def grid_to_csv(rows, record_runtime: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["mse"] = repr(float(row["mse"]))
        out["runtime_s"] = f"{row['runtime_s']:.3f}" if record_runtime else ""
        writer.writerow(out)
    return buf.getvalue()


def aggregate(rows):
    """Mean MSE and its standard error across seeds per ``(n, method, protocol)``; failed cells are skipped."""
    groups: dict = {}
    for row in rows:
        if np.isfinite(row["mse"]):
            groups.setdefault((row["n"], row["method"], row["protocol"]), []).append(row["mse"])
    out = {}
    for key, vals in sorted(groups.items()):
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else float("nan")
        out[key] = {"mean": float(vals.mean()), "stderr": float(se), "count": int(vals.size)}
    return out


# ---------------------------------------------------------------------------
# coverage


LINEAR_COEF = (1.0, 0.5, 0.0)


def linear_gaussian_sample(n: int, rng: np.random.Generator, coef=LINEAR_COEF, noise_sd: float = NOISE_SD):
    coef = np.asarray(coef, dtype=float)
    x = rng.standard_normal((n, coef.size))
    return Dataset(x, x @ coef + noise_sd * rng.standard_normal(n))


def linear_gaussian_target(p: float, a: int, coef=LINEAR_COEF) -> float:
    """``E|b_a X_a|^p`` for ``X_a ~ N(0, 1)``: ``|b_a|^p 2^(p/2) Gamma((p+1)/2) / sqrt(pi)``."""
    from scipy.special import gamma as gamma_fn

    b = abs(float(np.asarray(coef)[a]))
    return float(b ** p * 2 ** (p / 2) * gamma_fn((p + 1) / 2) / np.sqrt(np.pi))


def nonlinear_target(p: float, seed: int = 0, m: int = 20_000, background: int = 2000, a: int = TARGET) -> dict:
    """Monte-Carlo ``E|phi_a(X)|^p`` for the nonlinear design, with its standard error."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A26E7]))
    sigma = _design(int(seed), ORACLE_M)[0]
    model = GaussianCovariateModel(np.zeros(D), sigma)
    points = model.sample(m, rng)
    bg = model.sample(background, rng)
    curve = shap_curve_mc(f_star, points, bg, a, background, SubsetStrategy("exact"), rng)
    vals = np.abs(curve) ** p
    return {"value": float(vals.mean()), "stderr": float(vals.std(ddof=1) / np.sqrt(m)),
            "points": m, "background": background}


def _coverage_rep(args):
    dgp, p, a, n, rep, alpha_level, config, master_seed = args
    ss = np.random.SeedSequence([int(master_seed), int(rep), 0xC0FE])
    data_rng, fit_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if dgp == "linear_gaussian":
        data = linear_gaussian_sample(n, data_rng)
    else:
        sigma = _design(int(master_seed), ORACLE_M)[0]
        x = GaussianCovariateModel(np.zeros(D), sigma).sample(n, data_rng)
        data = Dataset(x, f_star(x) + NOISE_SD * data_rng.standard_normal(n))
    cfg = replace(config, alpha_level=alpha_level)
    try:
        est = estimate_power(data, a, p, cfg, fit_rng)
    except EstimationError as exc:
        return {"error": str(exc)}
    return {"theta": est.theta_hat, "low": est.ci_low, "high": est.ci_high}


def run_coverage_study(dgp: str = "linear_gaussian", p: float = 2.0, a: int = 0, n: int = 2000, reps: int = 500,
                       alpha_level: float = 0.05, config: PowerConfig | None = None, master_seed: int = 0,
                       jobs: int = 1, target: float | None = None) -> dict:
    """Fraction of replications whose interval contains the target, with mean width and estimate.

    ``linear_gaussian`` uses the closed-form target; ``nonlinear`` uses a
    Monte-Carlo target frozen into the report; each replication draws a fresh
    sample of the nonlinear design from its own stream.
    """
    if dgp in ("linear", "linear_gaussian"):
        dgp = "linear_gaussian"
        config = config or linear_power_config()
        if target is None:
            target = linear_gaussian_target(p, a)
        target_info = {"kind": "closed_form", "value": target}
    elif dgp == "nonlinear":
        config = config or PowerConfig(curve_learner=LearnerConfig(kind="ridge_rff", bandwidth=2.0))
        info = nonlinear_target(p, master_seed, a=a) if target is None else {"value": target}
        target = info["value"]
        target_info = {"kind": "monte_carlo", **info}
    else:
        raise ValueError(f"unknown dgp {dgp!r}")
    args = [(dgp, p, a, n, r, alpha_level, config, master_seed) for r in range(reps)]
    results = _map(_coverage_rep, args, jobs)
    ok = [r for r in results if "error" not in r]
    if not ok:
        raise EstimationError("coverage", "every replication failed")
    low = np.array([r["low"] for r in ok])
    high = np.array([r["high"] for r in ok])
    theta = np.array([r["theta"] for r in ok])
    return {
        "target": float(target),
        "reps": len(ok),
        "coverage": float(np.mean((low <= target) & (target <= high))),
        "mean_width": float(np.mean(high - low)),
        "mean_theta": float(np.mean(theta)),
        "failed": len(results) - len(ok),
        "dgp": dgp,
        "p": p,
        "feature": a,
        "n": n,
        "alpha_level": alpha_level,
        "target_info": target_info,
    }


def coverage_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
