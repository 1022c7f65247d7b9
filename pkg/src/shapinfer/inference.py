"""De-biased estimation of ``theta_p = E|phi_a(X)|^p`` with confidence intervals.

The score for an ordered pair ``(z, z')`` is

    m(z, z'; g) = head(phi(x)) + gamma(x) {psi_a(x, x'; mu) - phi(x)} + alpha(x') {y' - mu(x')}

with ``head(u) = |u|^p`` for ``p >= 2`` and the tanh-smoothed surrogate
otherwise. The estimator is the U-statistic of the symmetrized kernel
``h = (m(z, z') + m(z', z)) / 2`` and the interval uses the sample variance
of plug-in influence values, floored from below.

Only the ``gamma(x_i) psi(x_i, x_j)`` term couples the two samples, so the
exact U-statistic splits into two row means plus one pairwise sum.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .core_data import Dataset, _check_feature, subset_mask
from .curve import CurveNuisances, FitProtocol, GaussianZeta, fit_shap_curve
from .gaussian import GaussianCovariateModel, conditional_parts, conditional_sample, fit_gaussian, omega_s
from .learners import LearnerConfig, config_to_dict, fit_learner, linear_config
from .shap import SubsetStrategy, _fast_path_ok, as_function, pairwise_psi_sums, psi_score, subset_plan
from .smoothing import BetaSchedule, SmoothingSpec, beta_for_n, bias_envelope, varphi, varphi_prime

log = logging.getLogger(__name__)

DEFAULT_CLIP_FLOOR = 0.01
PAIR_CAP = 2_000_000
EXACT_PAIR_MAX_N = 4000
CSV_FIELDS = ("feature", "p", "theta_hat", "sigma_hat", "ci_low", "ci_high", "beta", "n")


class EstimationError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# representers


def gamma_rep(p: float, u):
    """``p sgn(u) |u|^(p-1)`` for ``p >= 2``."""
    if p < 2:
        raise ValueError(f"gamma_rep needs p >= 2, got {p}; use gamma_rep_smoothed")
    u = np.asarray(u, dtype=float)
    out = p * np.sign(u) * np.abs(u) ** (p - 1)
    return float(out) if out.ndim == 0 else out


def gamma_rep_smoothed(spec: SmoothingSpec, u):
    return varphi_prime(spec, u)


def head_term(p: float, beta: float | None, u):
    u = np.asarray(u, dtype=float)
    if p >= 2:
        return np.abs(u) ** p
    return varphi(SmoothingSpec(p, beta), u)


class GammaRule:
    """``gamma(x) = g'(phi(x))`` where ``g`` is the (smoothed) absolute power."""

    def __init__(self, phi, p: float, beta: float | None = None):
        self.phi = phi
        self.p = float(p)
        self.beta = beta
        if self.p < 2 and beta is None:
            raise ValueError("p < 2 needs a smoothing beta")

    def __call__(self, x):
        return self._rule(as_function(self.phi)(x))

    def grid(self, p, q):
        """``gamma`` at every ``p[i] + q[j]``; fast when ``phi`` has ``predict_grid``."""
        if hasattr(self.phi, "predict_grid"):
            return self._rule(self.phi.predict_grid(p, q))
        rows = p[:, None, :] + q[None, :, :]
        return self(rows.reshape(-1, p.shape[1])).reshape(p.shape[0], q.shape[0])

    def _rule(self, u):
        if self.p >= 2:
            return gamma_rep(self.p, u)
        return gamma_rep_smoothed(SmoothingSpec(self.p, self.beta), u)


def _full_rows(mask, x_s, draws):
    """Interleave fixed coordinates ``x_s`` (m, |S|) with draws (m, k, d-|S|) into (m, k, d)."""
    m, k = draws.shape[:2]
    rows = np.empty((m, k, mask.size))
    rows[:, :, mask] = x_s[:, None, :]
    rows[:, :, ~mask] = draws
    return rows


def conditional_gamma(model: GaussianCovariateModel, gamma, S, x_s, k: int, rng: np.random.Generator,
                      base=None):
    """Monte-Carlo ``E[gamma(X) | X_S = x_s]`` from ``k`` conditional draws.

    ``x_s`` is a ``|S|``-vector (scalar result) or an ``(m, |S|)`` batch.
    """
    if k < 1:
        raise ValueError("k must be positive")
    mask = subset_mask(int(S), model.d) if np.ndim(S) == 0 else np.asarray(S, dtype=bool)
    x_s = np.asarray(x_s, dtype=float)
    single = x_s.ndim <= 1
    x_s = x_s.reshape(1, -1) if single else x_s
    fn = as_function(gamma)
    if mask.all():
        out = np.asarray(fn(x_s), dtype=float)
    elif base is not None and hasattr(gamma, "grid"):
        # common random numbers make the rows additive: (x_s, mean_i) + (0, noise_j)
        cond_mean, noise = conditional_parts(model, mask, x_s, base)
        p = np.empty((x_s.shape[0], model.d))
        p[:, mask], p[:, ~mask] = x_s, cond_mean
        q = np.zeros((noise.shape[0], model.d))
        q[:, ~mask] = noise
        out = np.asarray(gamma.grid(p, q), dtype=float).mean(axis=1)
    else:
        draws = conditional_sample(model, mask, x_s, k, rng, base=base)
        rows = _full_rows(mask, x_s, draws)
        out = np.asarray(fn(rows.reshape(-1, model.d)), dtype=float).reshape(x_s.shape[0], k).mean(axis=1)
    return float(out[0]) if single else out


class AlphaRepresenter:
    """``alpha(x') = sum_S w(S) [gamma^{S+a}(x'_{S+a}) omega_{S+a}(x') - gamma^S(x'_S) omega_S(x')]``.

    Conditional expectations use ``k`` draws per coalition with common random
    numbers: one standard-normal block per coalition, drawn at construction and
    reused for every evaluation point. ``alpha`` is therefore a deterministic
    function once built. The unconditional mean ``gamma^{empty}`` is computed once.
    """

    def __init__(self, gamma, model: GaussianCovariateModel, a: int, strat: SubsetStrategy,
                 k: int = 256, rng: np.random.Generator | None = None, diagnostics: Counter | None = None,
                 chunk: int = 2048):
        rng = rng if rng is not None else np.random.default_rng(strat.seed)
        self.gamma, self.model, self.a, self.k = gamma, model, a, k
        self.diagnostics = diagnostics
        self.chunk = chunk
        d = model.d
        codes, weights = subset_plan(d, a, strat, rng)
        # collapse repeated coalitions from sampled mode
        uniq, inv = np.unique(codes, return_inverse=True)
        self.codes = uniq
        self.weights = np.bincount(inv, weights=weights)
        self._base = {}
        for code in sorted(set(int(c) for c in uniq) | set(int(c) | (1 << a) for c in uniq)):
            free = d - bin(code).count("1")
            if free:
                self._base[code] = rng.standard_normal((k, free))
        self._gamma_mean = None
        if 0 in self._base:
            draws = self.model.mean + self._base[0] @ self.model.chol.T
            self._gamma_mean = float(np.mean(as_function(gamma)(draws)))

    def _cond(self, code: int, xp):
        if code == 0:
            return np.full(xp.shape[0], self._gamma_mean)
        mask = subset_mask(code, self.model.d)
        return conditional_gamma(self.model, self.gamma, mask, xp[:, mask], self.k, None,
                                 base=self._base.get(code))

    def _eval(self, xp):
        out = np.zeros(xp.shape[0])
        for code, w in zip(self.codes, self.weights):
            c = int(code)
            ca = c | (1 << self.a)
            out += w * (self._cond(ca, xp) * omega_s(self.model, xp, ca, self.diagnostics)
                        - self._cond(c, xp) * omega_s(self.model, xp, c, self.diagnostics))
        return out

    def __call__(self, x_prime):
        xp = np.asarray(x_prime, dtype=float)
        single = xp.ndim == 1
        xp = np.atleast_2d(xp)
        out = np.concatenate([self._eval(xp[i:i + self.chunk]) for i in range(0, xp.shape[0], self.chunk)])
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite alpha representer")
        return float(out[0]) if single else out


def alpha_rep(x_prime, p_or_spec, gamma, model: GaussianCovariateModel, a: int,
              strat: SubsetStrategy = SubsetStrategy(), k: int = 256, rng: np.random.Generator | None = None):
    """One-off evaluation of the ``alpha`` representer at ``x'``.

    ``gamma`` is an evaluator on covariate rows; ``p_or_spec`` is kept for
    interface symmetry (the power enters only through ``gamma``).
    """
    del p_or_spec
    return AlphaRepresenter(gamma, model, a, strat, k, rng)(x_prime)


# ---------------------------------------------------------------------------
# score, kernel and U-statistic


@dataclass
class NuisanceBundle:
    phi: object
    mu: object
    gamma: object
    alpha: object
    p: float
    beta: float | None = None
    clip: float | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.p < 2 and self.beta is None:
            raise ValueError("p < 2 needs a smoothing beta")

    def head(self, u):
        return head_term(self.p, self.beta, u)


def score_m(z, z_prime, g: NuisanceBundle, a: int, strat: SubsetStrategy = SubsetStrategy(),
            rng: np.random.Generator | None = None):
    """De-biased score for ordered pairs; ``z = (x, y)``, rows may be batched."""
    scalar = np.ndim(z[0]) == 1
    x = np.atleast_2d(np.asarray(z[0], dtype=float))
    xp = np.atleast_2d(np.asarray(z_prime[0], dtype=float))
    yp = np.atleast_1d(np.asarray(z_prime[1], dtype=float))
    phi = as_function(g.phi)(x)
    out = (g.head(phi)
           + as_function(g.gamma)(x) * (psi_score(g.mu, x, xp, a, strat, rng) - phi)
           + as_function(g.alpha)(xp) * (yp - as_function(g.mu)(xp)))
    return float(out[0]) if scalar else out


def kernel_h(z, z_prime, g: NuisanceBundle, a: int, strat: SubsetStrategy = SubsetStrategy(),
             rng: np.random.Generator | None = None):
    """Symmetrized kernel ``(m(z, z') + m(z', z)) / 2``."""
    if strat.mode == "sampled":
        # both orientations must see the same coalitions for exact symmetry
        seed = int((rng if rng is not None else strat.rng()).integers(2 ** 63))
        r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
        return 0.5 * (score_m(z, z_prime, g, a, strat, r1) + score_m(z_prime, z, g, a, strat, r2))
    return 0.5 * (score_m(z, z_prime, g, a, strat) + score_m(z_prime, z, g, a, strat))


@dataclass
class _RowTerms:
    phi: np.ndarray
    head: np.ndarray
    gamma: np.ndarray
    alpha_resid: np.ndarray


def _row_terms(data: Dataset, g: NuisanceBundle) -> _RowTerms:
    phi = np.asarray(as_function(g.phi)(data.x), dtype=float)
    resid = data.y - as_function(g.mu)(data.x)
    return _RowTerms(phi, g.head(phi), np.asarray(as_function(g.gamma)(data.x), dtype=float),
                     np.asarray(as_function(g.alpha)(data.x), dtype=float) * resid)


def resolve_pair_budget(pair_budget, n: int, mu) -> int | None:
    """``None`` means every pair; otherwise the number of sampled pairs."""
    total = n * (n - 1) // 2
    if pair_budget in (None, "all"):
        return None
    if pair_budget == "auto":
        if n <= EXACT_PAIR_MAX_N or hasattr(mu, "outer_factors"):
            return None
        return min(PAIR_CAP, total)
    k = int(pair_budget)
    if k < 1:
        raise ValueError("pair budget must be positive")
    return k


def _pair_index(lin, n):
    """Map linear indices in ``[0, n(n-1)/2)`` to pairs ``i < j`` (row-major upper triangle)."""
    lin = np.asarray(lin, dtype=np.int64)
    # rows before i hold i*n - i(i+1)/2 pairs
    b = 2 * n - 1
    i = np.floor((b - np.sqrt(b * b - 8.0 * lin)) / 2).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    # guard against floating error at row boundaries
    over = lin < start
    i[over] -= 1
    start = i * n - i * (i + 1) // 2
    nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
    under = lin >= nxt
    i[under] += 1
    start = i * n - i * (i + 1) // 2
    j = lin - start + i + 1
    return i, j


def _sampled_pairs(n: int, k: int, rng: np.random.Generator):
    total = n * (n - 1) // 2
    if k >= total:
        lin = np.arange(total)
    else:
        lin = np.sort(rng.choice(total, size=k, replace=False))
    return _pair_index(lin, n)


def _budgeted(data, g, a, strat, terms, k, rng, chunk=100_000):
    i, j = _sampled_pairs(data.n, k, rng)
    sums = 0.0
    for s in range(0, i.size, chunk):
        ii, jj = i[s:s + chunk], j[s:s + chunk]
        psi_ij = psi_score(g.mu, data.x[ii], data.x[jj], a, strat, rng)
        psi_ji = psi_score(g.mu, data.x[jj], data.x[ii], a, strat, rng)
        h = 0.5 * (terms.head[ii] + terms.head[jj]
                   + terms.gamma[ii] * (psi_ij - terms.phi[ii]) + terms.gamma[jj] * (psi_ji - terms.phi[jj])
                   + terms.alpha_resid[jj] + terms.alpha_resid[ii])
        sums += float(h.sum())
    return sums / i.size, int(i.size)


def u_statistic(data: Dataset, g: NuisanceBundle, a: int, strat: SubsetStrategy = SubsetStrategy(),
                pair_budget="all", rng: np.random.Generator | None = None, return_details: bool = False):
    """U-statistic of the symmetrized kernel.

    ``pair_budget="all"`` averages over every unordered pair using the
    row/pair decomposition; an integer ``k`` averages the kernel over ``k``
    distinct pairs drawn uniformly without replacement (every pair when ``k``
    reaches ``n(n-1)/2``); ``"auto"`` picks all pairs when ``n <= 4000`` or
    ``mu`` admits the factorized pair sum, else ``2e6`` sampled pairs.
    """
    if data.n < 2:
        raise ValueError("the U-statistic needs n >= 2")
    _check_feature(data.d, a)
    rng = rng if rng is not None else strat.rng()
    terms = _row_terms(data, g)
    k = resolve_pair_budget(pair_budget, data.n, g.mu)
    lam = None
    if k is None:
        codes, weights = subset_plan(data.d, a, strat, rng)
        total, lam = pairwise_psi_sums(g.mu, data.x, terms.gamma, a, codes, weights)
        n = data.n
        theta = (float(np.mean(terms.head - terms.gamma * terms.phi)) + float(np.mean(terms.alpha_resid))
                 + total / (n * (n - 1)))
        used = n * (n - 1) // 2
    else:
        theta, used = _budgeted(data, g, a, strat, terms, k, rng)
    if not np.isfinite(theta):
        raise FloatingPointError("non-finite U-statistic")
    if return_details:
        return theta, {"pairs_used": used, "terms": terms, "lam_sum": lam}
    return theta


def influence_values(data: Dataset, g: NuisanceBundle, a: int, strat: SubsetStrategy = SubsetStrategy(),
                     rng: np.random.Generator | None = None, theta: float | None = None,
                     pair_budget="all", details: dict | None = None) -> np.ndarray:
    """Plug-in influence values ``head_i + alpha_i r_i + Lambda_i - (p+1) theta``.

    ``Lambda_i`` averages ``gamma(x_j) psi_a(x_j, x_i)`` over the other rows
    (leave-one-out). Above the pair budget it averages over a random subset of
    partners per row instead.
    """
    rng = rng if rng is not None else strat.rng()
    n = data.n
    if details is None or theta is None:
        theta, details = u_statistic(data, g, a, strat, pair_budget, rng, return_details=True)
    terms = details["terms"]
    lam_sum = details.get("lam_sum")
    if lam_sum is not None:
        lam = lam_sum / (n - 1)
    else:
        m = max(1, min(n - 1, PAIR_CAP // n))
        lam = np.empty(n)
        for i in range(n):
            partners = rng.choice(n - 1, size=m, replace=False)
            partners[partners >= i] += 1
            vals = psi_score(g.mu, data.x[partners], np.broadcast_to(data.x[i], (m, data.d)), a, strat, rng)
            lam[i] = float(np.mean(terms.gamma[partners] * vals))
    return terms.head + terms.alpha_resid + lam - (g.p + 1) * theta


# ---------------------------------------------------------------------------
# intervals


@dataclass
class PowerEstimate:
    p: float
    theta_hat: float
    sigma_hat: float
    ci_low: float
    ci_high: float
    alpha_level: float
    n: int
    beta: float | None = None
    feature: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True, default=_jsonable)

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in CSV_FIELDS}
        # one-based feature index, matching the command line
        row["feature"] = None if self.feature is None else self.feature + 1
        return {k: "" if v is None else v for k, v in row.items()}


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def estimates_to_csv(estimates) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for est in estimates:
        writer.writerow(est.csv_row())
    return buf.getvalue()


def confidence_interval(theta_hat: float, rho, alpha_level: float = 0.05,
                        clip_floor: float = DEFAULT_CLIP_FLOOR, p: float = 2.0, beta: float | None = None,
                        diagnostics: dict | None = None) -> PowerEstimate:
    """Normal interval ``theta_hat +- z_{alpha/2} sqrt(max(var(rho), clip_floor) / n)``."""
    rho = np.asarray(rho, dtype=float)
    if rho.size < 2:
        raise ValueError("need at least two influence values")
    if not 0 < alpha_level < 1:
        raise ValueError("alpha_level must lie in (0, 1)")
    if clip_floor < 0:
        raise ValueError("clip_floor must be nonnegative")
    n = rho.size
    var = float(np.var(rho, ddof=1))
    used = max(var, clip_floor)
    half = float(norm.ppf(1 - alpha_level / 2)) * np.sqrt(used / n)
    diag = dict(diagnostics or {})
    diag.update({"variance_raw": var, "variance_used": used, "clip_floor": clip_floor,
                 "variance_clipped": bool(var < clip_floor)})
    if theta_hat < 0:
        diag["negative_theta"] = True
    return PowerEstimate(p=float(p), theta_hat=float(theta_hat), sigma_hat=float(np.sqrt(var)),
                         ci_low=float(theta_hat - half), ci_high=float(theta_hat + half),
                         alpha_level=float(alpha_level), n=int(n), beta=beta, diagnostics=diag)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True)
class PowerConfig:
    """Nuisance-fitting plan and inference settings for :func:`estimate_power`."""

    curve_learner: LearnerConfig = field(default_factory=LearnerConfig)
    mu_learner: LearnerConfig | None = None
    curve_loss: str = "orthogonal"
    protocol: FitProtocol = field(default_factory=FitProtocol)
    delta: float = 1.0
    beta_scale: float = 1.0
    beta_exponent: float | None = None
    clip_floor: float = DEFAULT_CLIP_FLOOR
    alpha_level: float = 0.05
    subsets: SubsetStrategy | None = None
    pair_budget: object = "auto"
    k_conditional: int = 256
    pairs_per_row: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "curve_learner": config_to_dict(self.curve_learner),
            "mu_learner": None if self.mu_learner is None else config_to_dict(self.mu_learner),
            "curve_loss": self.curve_loss,
            "protocol": asdict(self.protocol),
            "delta": self.delta,
            "beta_scale": self.beta_scale,
            "beta_exponent": self.beta_exponent,
            "clip_floor": self.clip_floor,
            "alpha_level": self.alpha_level,
            "subsets": None if self.subsets is None else asdict(self.subsets),
            "pair_budget": self.pair_budget,
            "k_conditional": self.k_conditional,
            "pairs_per_row": self.pairs_per_row,
            "seed": self.seed,
        }


def linear_power_config(**kw) -> PowerConfig:
    """Linear learners for both nuisances; exact when the regression is linear."""
    return replace(PowerConfig(curve_learner=linear_config()), **kw)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except EstimationError:
        raise
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise EstimationError(name, str(exc)) from exc


def fit_nuisances(data: Dataset, a: int, p: float, beta: float | None, config: PowerConfig,
                  rng: np.random.Generator, counter: Counter) -> NuisanceBundle:
    strat = config.subsets or SubsetStrategy.auto(data.d, seed=config.seed)
    mu_cfg = config.mu_learner or config.curve_learner
    mu = _stage("fit_mu", fit_learner, data, mu_cfg, rng)
    gauss = _stage("fit_covariates", fit_gaussian, data.x)
    nus = CurveNuisances(mu, GaussianZeta(gauss, counter))
    phi = _stage("fit_curve", fit_shap_curve, data, a, config.curve_learner, nus, config.curve_loss,
                 FitProtocol("reuse"), strat, rng, pairs_per_row=config.pairs_per_row)
    gamma = GammaRule(phi, p, beta)
    alpha = _stage("build_alpha", AlphaRepresenter, gamma, gauss, a, strat, config.k_conditional, rng, counter)
    return NuisanceBundle(phi, mu, gamma, alpha, p, beta, clip=getattr(phi, "clip", None))


def estimate_power(data: Dataset, a: int, p: float, config: PowerConfig = PowerConfig(),
                   rng: np.random.Generator | None = None) -> PowerEstimate:
    """Fit nuisances, then compute the U-statistic, influence values and interval.

    With the default split protocol the nuisances are fitted on one part of the
    rows and the estimate is computed on the other; ``reuse`` uses every row for
    both, which the asymptotic guarantees do not cover.
    """
    _check_feature(data.d, a)
    if p < 1:
        raise ValueError("p must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    strat = config.subsets or SubsetStrategy.auto(data.d, seed=config.seed)
    nuis_rows, eval_rows = config.protocol.partition(data.n, rng)
    eval_data = data.subset(eval_rows)
    beta = None
    if p < 2:
        schedule = _stage("beta_schedule", BetaSchedule, p, config.delta, config.beta_scale, config.beta_exponent)
        beta = beta_for_n(schedule, eval_data.n)
    counter = Counter()
    g = fit_nuisances(data.subset(nuis_rows), a, p, beta, config, rng, counter)
    theta, details = _stage("u_statistic", u_statistic, eval_data, g, a, strat, config.pair_budget, rng,
                            return_details=True)
    rho = _stage("influence", influence_values, eval_data, g, a, strat, rng, theta, config.pair_budget, details)
    if not np.all(np.isfinite(rho)):
        raise EstimationError("influence", "non-finite influence values")
    diagnostics = {
        "pairs_used": details["pairs_used"],
        "ratio_clamps": int(counter["ratio_clamps"]),
        "protocol": config.protocol.mode,
        "n_nuisance_rows": int(nuis_rows.size),
        "fast_pair_path": bool(details["lam_sum"] is not None and _fast_path_ok(g.mu, eval_data.x)),
    }
    if beta is not None:
        diagnostics["bias_envelope"] = bias_envelope(p, config.delta, beta)
    est = confidence_interval(theta, rho, config.alpha_level, config.clip_floor, p, beta, diagnostics)
    est.feature = a
    log.info("theta_hat=%.6g ci=[%.6g, %.6g] n=%d", est.theta_hat, est.ci_low, est.ci_high, est.n)
    return est
