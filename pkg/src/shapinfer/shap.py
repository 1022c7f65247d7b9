"""Two-sample SHAP score and a Monte-Carlo oracle for the marginal SHAP curve.

For a regression ``mu``, target feature ``a`` and a pair of covariate
vectors ``(x, x')`` the score is

    psi_a(x, x'; mu) = sum_{S not containing a} w(S) [mu(x_{S+a}, x'_{-S-a}) - mu(x_S, x'_{-S})]

and the SHAP curve is its average over ``x'`` drawn from the covariate law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_data import (
    ENUMERATION_CAP,
    ShapleyDistribution,
    enumerate_subsets,
    popcount,
    sample_shapley_subsets,
    shapley_weight,
    subset_mask,
)

_MAX_ROWS = 50_000


@dataclass(frozen=True)
class SubsetStrategy:
    """How sums over coalitions are evaluated.

    ``exact`` enumerates every coalition (requires ``d <= cap``); ``sampled``
    averages over ``k_subsets`` Shapley-distributed draws.
    """

    mode: str = "exact"
    k_subsets: int = 128
    seed: int = 0
    cap: int = ENUMERATION_CAP

    def __post_init__(self):
        if self.mode not in ("exact", "sampled"):
            raise ValueError(f"unknown subset mode {self.mode!r}")
        if self.k_subsets < 1:
            raise ValueError("k_subsets must be positive")

    @classmethod
    def auto(cls, d: int, k_subsets: int = 128, seed: int = 0) -> "SubsetStrategy":
        return cls("exact" if d <= ENUMERATION_CAP else "sampled", k_subsets, seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def as_function(model):
    """Accept a fitted model (anything with ``predict``) or a plain callable on row batches."""
    return model.predict if hasattr(model, "predict") else model


def subset_plan(d: int, a: int, strat: SubsetStrategy, rng: np.random.Generator | None = None):
    """Coalition codes and weights shared by every pair.

    Exact mode returns all coalitions with their Shapley weights; sampled
    mode returns ``k_subsets`` draws with equal weights.
    """
    if strat.mode == "exact":
        if d > strat.cap:
            raise ValueError(f"exact subset mode requires d <= {strat.cap}, got d={d}")
        codes = enumerate_subsets(d, a, strat.cap)
        return codes, np.asarray(shapley_weight(d, popcount(codes)), dtype=float).reshape(-1)
    rng = rng if rng is not None else strat.rng()
    codes = sample_shapley_subsets(ShapleyDistribution(d, a), rng, strat.k_subsets)
    return codes, np.full(codes.size, 1.0 / codes.size)


def _evaluate(fn, rows: np.ndarray) -> np.ndarray:
    if rows.shape[0] <= _MAX_ROWS:
        return np.asarray(fn(rows), dtype=float)
    return np.concatenate([np.asarray(fn(rows[i:i + _MAX_ROWS]), dtype=float)
                           for i in range(0, rows.shape[0], _MAX_ROWS)])


def increments(mu, x, x_prime, a: int, codes) -> np.ndarray:
    """``mu(mix(S + a)) - mu(mix(S))`` for each row and each code.

    ``codes`` is a 1-d array shared by all rows (result ``(n, K)``) or an
    ``(n, K)`` array of per-row codes.
    """
    fn = as_function(mu)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_prime = np.atleast_2d(np.asarray(x_prime, dtype=float))
    x, x_prime = np.broadcast_arrays(x, x_prime)
    n, d = x.shape
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = np.broadcast_to(codes, (n, codes.size))
    k = codes.shape[1]
    with_a = codes | (np.int64(1) << a)
    m_without = subset_mask(codes, d)
    m_with = subset_mask(with_a, d)
    xs = x[:, None, :]
    xp = x_prime[:, None, :]
    rows = np.concatenate([
        np.where(m_with, xs, xp).reshape(-1, d),
        np.where(m_without, xs, xp).reshape(-1, d),
    ])
    vals = _evaluate(fn, rows)
    return (vals[: n * k] - vals[n * k:]).reshape(n, k)


def psi_score(mu, x, x_prime, a: int, strat: SubsetStrategy = SubsetStrategy(),
              rng: np.random.Generator | None = None):
    """Two-sample SHAP score for one pair (vectors) or row-aligned pairs (matrices).

    Sampled mode draws ``k_subsets`` coalitions independently for every row;
    the two terms of each increment share the coalition.
    """
    scalar = np.ndim(x) == 1 and np.ndim(x_prime) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_prime = np.atleast_2d(np.asarray(x_prime, dtype=float))
    if x.shape[-1] != x_prime.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {x_prime.shape[-1]}")
    d = x.shape[-1]
    if not 0 <= a < d:
        raise ValueError(f"feature index {a} out of range for d={d}")
    n = max(x.shape[0], x_prime.shape[0])
    if strat.mode == "exact":
        codes, weights = subset_plan(d, a, strat)
        out = increments(mu, x, x_prime, a, codes) @ weights
    else:
        rng = rng if rng is not None else strat.rng()
        codes = sample_shapley_subsets(ShapleyDistribution(d, a), rng, (n, strat.k_subsets))
        out = increments(mu, x, x_prime, a, codes).mean(axis=1)
    return float(out[0]) if scalar else out


def shap_curve_mc(mu, x, background, a: int, m: int, strat: SubsetStrategy = SubsetStrategy(),
                  rng: np.random.Generator | None = None, replace: bool | None = None,
                  return_stderr: bool = False):
    """Monte-Carlo estimate of the SHAP curve at ``x`` (a point or a batch of points).

    Averages ``psi_score(mu, x, x')`` over ``m`` background rows. By default
    rows are drawn without replacement when ``m <= len(background)`` (so
    ``m = len(background)`` uses the whole background) and bootstrapped
    otherwise; ``replace=True`` always bootstraps.
    """
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.shape[0] == 0:
        raise ValueError("empty background")
    rng = rng if rng is not None else np.random.default_rng(strat.seed)
    scalar = np.ndim(x) == 1
    points = np.atleast_2d(np.asarray(x, dtype=float))
    nb = background.shape[0]
    if replace is None:
        replace = m > nb
    est = np.empty(points.shape[0])
    err = np.empty(points.shape[0])
    for i, point in enumerate(points):
        if not replace and m == nb:
            bg = background
        else:
            bg = background[rng.choice(nb, size=m, replace=replace)]
        vals = psi_score(mu, point[None, :], bg, a, strat, rng)
        est[i] = vals.mean()
        err[i] = vals.std(ddof=1) / np.sqrt(m) if m > 1 else np.inf
    if scalar:
        est, err = float(est[0]), float(err[0])
    return (est, err) if return_stderr else est


# ---------------------------------------------------------------------------
# pairwise sums used by the U-statistic


def _fast_path_ok(mu, x) -> bool:
    if not hasattr(mu, "outer_factors"):
        return False
    return mu.clip is None or mu.raw_bound(x) <= mu.clip


def pairwise_psi_sums(mu, x, gamma, a: int, codes, weights, chunk: int = 256):
    """Sums of ``gamma * psi`` over ordered pairs of distinct rows.

    Returns ``(total, lam)`` where ``total = sum_{i != j} gamma_i psi(x_i, x_j)``
    and ``lam[i] = sum_{j != i} gamma_j psi(x_j, x_i)``. Models exposing
    ``outer_factors`` whose clip bound cannot bind are summed in
    ``O(n * features)``; others fall back to chunked evaluation of all pairs.
    """
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n, d = x.shape
    if _fast_path_ok(mu, x):
        total = 0.0
        lam = np.zeros(n)
        for code, w in zip(codes, weights):
            for sign, c in ((1.0, int(code) | (1 << a)), (-1.0, int(code))):
                left, right = mu.outer_factors(x, subset_mask(c, d))
                g_left = gamma @ left
                total += sign * w * float(np.real(g_left @ right.sum(axis=0)))
                lam += sign * w * np.real(right @ g_left)
        # diagonal pairs: mix(x_i, x_i, S) = x_i, identical for S and S + a, so they cancel
        return total, lam
    total = 0.0
    lam = np.zeros(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        xi = np.repeat(x[start:stop], n, axis=0)
        xj = np.tile(x, (stop - start, 1))
        psi = (increments(mu, xi, xj, a, codes) @ weights).reshape(stop - start, n)
        idx = np.arange(start, stop)
        psi[idx - start, idx] = 0.0
        total += float(gamma[start:stop] @ psi.sum(axis=1))
        lam += gamma[start:stop] @ psi
    return total, lam
