"""Learning the SHAP curve by empirical risk minimization.

Two pairwise losses are available for a candidate curve ``phi``:

* naive:      ``0.5 * (phi(x) - psi_a(x, x'; mu))^2``
* orthogonal: a Shapley-weighted sum of partial losses ``l_S`` that adds a
  residual-weighted correction ``-sigma(S) phi(x_S, x'_{-S}) zeta^S(x, x') (y - mu(x))``
  making the population loss first-order insensitive to errors in ``mu``
  and ``zeta``.

Both losses share the quadratic part ``0.5 phi(x)^2 - phi(x) psi_a``, so for
classes that are linear in their parameters the minimizer solves a ridge
system; the feedforward class is trained with Adam.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .core_data import Dataset, ShapleyDistribution, sample_shapley_subsets, subset_mask
from .gaussian import GaussianCovariateModel, fit_gaussian, zeta_s
from .learners import (
    FeedforwardModel,
    FitError,
    LearnerConfig,
    LinearModel,
    RegressionModel,
    draw_rff,
    fit_learner,
    init_mlp,
    mlp_backward,
    mlp_forward,
    resolve_clip,
    solve_penalized,
    standardizer,
    train_mlp,
)
from .shap import SubsetStrategy, as_function, psi_score, subset_plan

log = logging.getLogger(__name__)


class GaussianZeta:
    """Change-of-measure weights ``zeta^S(x, x')`` under a Gaussian covariate model."""

    def __init__(self, model: GaussianCovariateModel, diagnostics: Counter | None = None):
        self.model = model
        self.diagnostics = diagnostics

    def __call__(self, x, x_prime, code):
        return zeta_s(self.model, np.atleast_2d(x), np.atleast_2d(x_prime), int(code), self.diagnostics)


@dataclass
class CurveNuisances:
    """Outcome regression ``mu`` and change-of-measure weights ``zeta(x, x', code)``."""

    mu: object
    zeta: object


@dataclass(frozen=True)
class FitProtocol:
    """``split`` fits ``mu`` and ``phi`` on disjoint halves; ``reuse`` uses every row for both.

    Reuse violates the independence between nuisances and the sample that the
    excess-risk guarantees assume; it is provided for empirical comparison.
    """

    mode: str = "split"
    split_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in ("split", "reuse"):
            raise ValueError(f"unknown protocol {self.mode!r}")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")

    def partition(self, n: int, rng: np.random.Generator):
        """Row indices for the nuisance fit and for the curve fit."""
        if self.mode == "reuse":
            rows = np.arange(n)
            return rows, rows
        order = rng.permutation(n)
        cut = int(round(self.split_fraction * n))
        cut = min(max(cut, 1), n - 1)
        return np.sort(order[:cut]), np.sort(order[cut:])


def _sigma(code: int, a: int) -> float:
    return 1.0 if (int(code) >> a) & 1 else -1.0


def _pairs(z, z_prime):
    x, y = z
    xp = z_prime[0]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return x, y, xp


def partial_loss(S: int, z, z_prime, phi, nus: CurveNuisances, a: int):
    """``(phi(x)/2 - sigma(S) mu(x_S, x'_{-S}))^2 - sigma(S) phi(x_S, x'_{-S}) zeta^S(x, x') (y - mu(x))``.

    ``z = (x, y)`` and ``z_prime = (x', y')``; rows may be batched.
    """
    scalar = np.ndim(z[0]) == 1
    x, y, xp = _pairs(z, z_prime)
    phi_f, mu_f = as_function(phi), as_function(nus.mu)
    mask = subset_mask(int(S), x.shape[1])
    mixed = np.where(mask, x, xp)
    sig = _sigma(S, a)
    out = (phi_f(x) / 2 - sig * mu_f(mixed)) ** 2 - sig * phi_f(mixed) * nus.zeta(x, xp, S) * (y - mu_f(x))
    return float(out[0]) if scalar else out


def _direct_ortho(x, y, xp, phi, nus, a, codes, weights):
    total = 0.0
    for code, w in zip(codes, weights):
        c = int(code)
        total = total + w * (partial_loss(c | (1 << a), (x, y), (xp, None), phi, nus, a)
                             + partial_loss(c, (x, y), (xp, None), phi, nus, a))
    return total


def ortho_loss(z, z_prime, phi, nus: CurveNuisances, a: int, strat: SubsetStrategy = SubsetStrategy(),
               rng: np.random.Generator | None = None):
    """Shapley-weighted sum of paired partial losses ``l_{S+a} + l_S``.

    Sampled mode averages over ``k_subsets`` coalitions drawn once and shared by the batch.
    """
    scalar = np.ndim(z[0]) == 1
    x, y, xp = _pairs(z, z_prime)
    codes, weights = subset_plan(x.shape[1], a, strat, rng)
    out = _direct_ortho(x, y, xp, phi, nus, a, codes, weights)
    return float(out[0]) if scalar else out


def naive_loss(z, z_prime, phi, mu, a: int, strat: SubsetStrategy = SubsetStrategy(),
               rng: np.random.Generator | None = None):
    """``0.5 * (phi(x) - psi_a(x, x'; mu))^2``; not symmetric in ``(z, z')``."""
    scalar = np.ndim(z[0]) == 1
    x, _, xp = _pairs(z, z_prime)
    out = 0.5 * (as_function(phi)(x) - psi_score(mu, x, xp, a, strat, rng)) ** 2
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# ERM


def _correction_features(features, x, xp, resid, nus, a, codes, weights):
    """``resid_i * sum_S w(S) [f(mix_{S+a}) zeta^{S+a} - f(mix_S) zeta^S]`` per row."""
    d = x.shape[1]
    out = 0.0
    for code, w in zip(codes, weights):
        c = int(code)
        for sign, cc in ((1.0, c | (1 << a)), (-1.0, c)):
            mixed = np.where(subset_mask(cc, d), x, xp)
            out = out + (sign * w) * features(mixed) * nus.zeta(x, xp, cc)[:, None]
    return out * resid[:, None]


def _fit_linear_in_params(base, amp, x, y, xp, psi, nus, a, loss, strat, ridge, rng):
    n = x.shape[0]
    feats = lambda rows: _scaled(base.features(rows), amp)
    F = feats(x)
    gram = F.T @ F / n
    target = F.T @ psi / n
    if loss == "orthogonal":
        resid = y - as_function(nus.mu)(x)
        if strat.mode == "exact":
            codes, weights = subset_plan(x.shape[1], a, strat)
            corr = _correction_features(feats, x, xp, resid, nus, a, codes, weights)
        else:
            # k independent coalitions per pair, grouped by code to vectorize
            dist = ShapleyDistribution(x.shape[1], a)
            draws = sample_shapley_subsets(dist, rng, (n, strat.k_subsets))
            corr = np.zeros_like(F)
            for code in np.unique(draws):
                hits = (draws == code).sum(axis=1)
                rows = np.flatnonzero(hits)
                part = _correction_features(feats, x[rows], xp[rows], resid[rows], nus, a, [code], [1.0])
                corr[rows] += part * (hits[rows] / strat.k_subsets)[:, None]
        target = target + corr.mean(axis=0)
    theta = solve_penalized(gram, target, ridge)
    if not np.all(np.isfinite(theta)):
        raise FitError("curve solution is not finite")
    return _scaled(theta[None, :], amp)[0]


def _scaled(F, amp):
    if amp == 1.0:
        return F
    F = F.copy()
    F[:, 1:] *= amp
    return F


def _fit_feedforward_curve(x, y, pool, nus, a, loss, cfg: LearnerConfig, strat, rng, trace_out, partners):
    """Adam on the pairwise loss.

    Every row gets ``partners`` bootstrap partners ``x'`` from ``pool`` with
    precomputed targets ``psi``; each epoch uses one of them per row, chosen at
    random. With exact subsets the orthogonal correction sums over every
    coalition; in sampled mode it uses one Shapley-distributed coalition per
    pair, redrawn every epoch, which gives an unbiased stochastic gradient.
    """
    n, d = x.shape
    mu = as_function(nus.mu)
    dist = ShapleyDistribution(d, a)
    in_mean, in_scale = standardizer(x)
    h = (x - in_mean) / in_scale
    state = {}
    partners = max(1, min(int(partners), cfg.epochs))
    bank = pool[rng.integers(0, pool.shape[0], size=(partners, n))]
    bank_psi = np.stack([psi_score(mu, x, bank[r], a, strat, rng) for r in range(partners)])
    out_mean = float(bank_psi.mean())
    out_scale = float(bank_psi.std()) or 1.0
    resid = (y - mu(x)) / out_scale if loss == "orthogonal" else None
    rows_all = np.arange(n)
    exact = strat.mode == "exact"
    if exact:
        codes_all, w_all = subset_plan(d, a, strat)
        masks_with = subset_mask(codes_all | (np.int64(1) << a), d)
        masks_without = subset_mask(codes_all, d)
    weights, biases = init_mlp([d, *cfg.hidden, 1], rng)

    def new_epoch(epoch):
        pick = rng.integers(0, partners, size=n) if partners > 1 else np.zeros(n, dtype=np.int64)
        xp = bank[pick, rows_all]
        state["epoch"] = epoch
        state["hp"] = (xp - in_mean) / in_scale
        state["target"] = (bank_psi[pick, rows_all] - out_mean) / out_scale
        if resid is not None and exact:
            state["xp"] = xp
            state["zeta_with"] = np.stack([nus.zeta(x, xp, int(c) | (1 << a)) for c in codes_all], axis=1)
            state["zeta_without"] = np.stack([nus.zeta(x, xp, int(c)) for c in codes_all], axis=1)
        elif resid is not None:
            codes = sample_shapley_subsets(dist, rng, n)
            state["codes"] = codes
            state["zeta_with"] = _zeta_rows(nus, x, xp, codes | (np.int64(1) << a))
            state["zeta_without"] = _zeta_rows(nus, x, xp, codes)

    def batch_grad(idx, epoch):
        if state.get("epoch") != epoch:
            new_epoch(epoch)
        b = idx.size
        target = state["target"][idx]
        if resid is None:
            out, acts = mlp_forward(weights, biases, h[idx])
            err = out - target
            gw, gb = mlp_backward(weights, acts, err / b)
            return 0.5 * float(np.mean(err ** 2)), gw, gb
        hp = state["hp"][idx]
        if exact:
            return _exact_correction_step(weights, biases, h[idx], hp, target, resid[idx],
                                          state["zeta_with"][idx], state["zeta_without"][idx],
                                          masks_with, masks_without, w_all)
        codes = state["codes"][idx]
        m_with = subset_mask(codes | (np.int64(1) << a), d)
        m_without = subset_mask(codes, d)
        rows = np.concatenate([h[idx], np.where(m_with, h[idx], hp), np.where(m_without, h[idx], hp)])
        zeta_with, zeta_without = state["zeta_with"][idx], state["zeta_without"][idx]
        out, acts = mlp_forward(weights, biases, rows)
        f0, fa, fs = out[:b], out[b:2 * b], out[2 * b:]
        r = resid[idx]
        err = f0 - target
        loss_val = 0.5 * err ** 2 - r * (fa * zeta_with - fs * zeta_without)
        grad = np.concatenate([err, -r * zeta_with, r * zeta_without]) / b
        gw, gb = mlp_backward(weights, acts, grad)
        return float(np.mean(loss_val)), gw, gb

    weights, biases, trace = train_mlp(weights, biases, n, batch_grad, cfg, rng)
    if trace_out is not None:
        trace_out.extend(trace)
    return FeedforwardModel(weights, biases, in_mean, in_scale, out_mean, out_scale), bank_psi.ravel()


def _exact_correction_step(weights, biases, h, hp, target, r, zeta_with, zeta_without,
                           masks_with, masks_without, w):
    b, k = h.shape[0], w.size
    mixed_with = np.where(masks_with[None, :, :], h[:, None, :], hp[:, None, :]).reshape(-1, h.shape[1])
    mixed_without = np.where(masks_without[None, :, :], h[:, None, :], hp[:, None, :]).reshape(-1, h.shape[1])
    out, acts = mlp_forward(weights, biases, np.concatenate([h, mixed_with, mixed_without]))
    f0 = out[:b]
    fa = out[b:b + b * k].reshape(b, k)
    fs = out[b + b * k:].reshape(b, k)
    err = f0 - target
    cw = r[:, None] * zeta_with * w
    cs = r[:, None] * zeta_without * w
    loss_val = 0.5 * err ** 2 - np.sum(fa * cw - fs * cs, axis=1)
    grad = np.concatenate([err, -cw.ravel(), cs.ravel()]) / b
    gw, gb = mlp_backward(weights, acts, grad)
    return float(np.mean(loss_val)), gw, gb


def _zeta_rows(nus, x, xp, codes):
    out = np.empty(codes.size)
    for code in np.unique(codes):
        rows = codes == code
        out[rows] = nus.zeta(x[rows], xp[rows], int(code))
    return out


def fit_shap_curve(data: Dataset, a: int, learner_cfg: LearnerConfig, nus: CurveNuisances | None = None,
                   loss: str = "orthogonal", protocol: FitProtocol = FitProtocol(),
                   strat: SubsetStrategy | None = None, rng: np.random.Generator | None = None,
                   mu_cfg: LearnerConfig | None = None, pairs_per_row: int = 1,
                   partners: int = 8, diagnostics: dict | None = None) -> RegressionModel:
    """Empirical risk minimizer of the naive or orthogonal loss over a learner class.

    When ``nus`` is None the outcome regression (``mu_cfg``, defaulting to
    ``learner_cfg``) and a Gaussian covariate model are fitted on the
    nuisance rows of ``protocol``; the curve is fitted on the remaining rows
    (``split``) or on all rows (``reuse``). Each curve row is paired with
    ``pairs_per_row`` covariate vectors resampled from the curve rows.
    Feedforward curves draw a bank of ``partners`` bootstrap partners per row
    and pick one per epoch; linear-in-parameters classes use one fixed draw
    per pair and an exact solve.
    """
    if loss not in ("naive", "orthogonal"):
        raise ValueError(f"unknown loss {loss!r}")
    rng = rng if rng is not None else np.random.default_rng()
    strat = strat or SubsetStrategy.auto(data.d)
    counter = Counter()
    nuis_rows, curve_rows = protocol.partition(data.n, rng)
    if nus is None:
        nuis = data.subset(nuis_rows)
        mu = fit_learner(nuis, mu_cfg or learner_cfg, rng)
        nus = CurveNuisances(mu, GaussianZeta(fit_gaussian(nuis.x), counter))
    curve = data.subset(curve_rows)
    x = np.repeat(curve.x, pairs_per_row, axis=0)
    y = np.repeat(curve.y, pairs_per_row)
    trace: list = []
    if learner_cfg.kind == "feedforward":
        model, psi = _fit_feedforward_curve(x, y, curve.x, nus, a, loss, learner_cfg, strat, rng, trace,
                                            partners)
        model.clip = resolve_clip(learner_cfg.clip, psi)
    else:
        if learner_cfg.kind == "ridge_rff":
            base, amp = draw_rff(curve.x, learner_cfg, rng)
            ridge = learner_cfg.ridge
        else:
            base, amp = LinearModel(np.zeros(data.d)), 1.0
            ridge = learner_cfg.ridge
        xp = curve.x[rng.integers(0, curve.n, size=x.shape[0])]
        psi = psi_score(nus.mu, x, xp, a, strat, rng)
        theta = _fit_linear_in_params(base, amp, x, y, xp, psi, nus, a, loss, strat, ridge, rng)
        model = base.with_params(theta, resolve_clip(learner_cfg.clip, psi))
    if diagnostics is not None:
        diagnostics.update({
            "loss": loss,
            "protocol": protocol.mode,
            "n_nuisance_rows": int(nuis_rows.size),
            "n_curve_rows": int(curve_rows.size),
            "loss_trace": [float(v) for v in trace],
            "ratio_clamps": int(counter["ratio_clamps"]),
            "mu": nus.mu,
        })
    log.debug("fitted %s curve (%s/%s) on %d rows", learner_cfg.kind, loss, protocol.mode, curve_rows.size)
    return model


# ---------------------------------------------------------------------------
# numerical orthogonality diagnostic


def orthogonality_check(phi_star, nus_true: CurveNuisances, a: int, direction_phi, direction_mu,
                        direction_zeta=None, mc_pairs: int = 20000, eps: float = 1e-2,
                        rng: np.random.Generator | None = None, sampler=None,
                        loss: str = "orthogonal", strat: SubsetStrategy = SubsetStrategy()):
    """Central-difference cross derivative of the Monte-Carlo population loss.

    Estimates ``d^2/ds dt L(phi* + t dphi; mu + s dmu, zeta + s dzeta)`` at
    ``s = t = 0`` from ``mc_pairs`` pairs drawn by ``sampler(m, rng) -> Dataset``.
    All four loss evaluations share the same pairs, so the per-pair
    differences give the standard error. Returns ``(estimate, stderr)``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    z = sampler(mc_pairs, rng)
    zp = sampler(mc_pairs, rng)
    phi0, mu0 = as_function(phi_star), as_function(nus_true.mu)
    dphi, dmu = as_function(direction_phi), as_function(direction_mu)

    def pointwise(t, s):
        phi = lambda rows: phi0(rows) + t * dphi(rows)
        mu = lambda rows: mu0(rows) + s * dmu(rows)
        if loss == "naive":
            return naive_loss((z.x, z.y), (zp.x, zp.y), phi, mu, a, strat)
        if direction_zeta is None:
            zeta = nus_true.zeta
        else:
            zeta = lambda x, xp, code: nus_true.zeta(x, xp, code) + s * direction_zeta(x, xp, code)
        return ortho_loss((z.x, z.y), (zp.x, zp.y), phi, CurveNuisances(mu, zeta), a, strat)

    vals = (pointwise(eps, eps) - pointwise(eps, -eps) - pointwise(-eps, eps) + pointwise(-eps, -eps)) / (4 * eps ** 2)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))
