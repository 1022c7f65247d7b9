"""Gaussian model of the covariates: density ratios and conditional sampling.

All densities are evaluated in log-space. Ratios are clamped to
``[RATIO_MIN, RATIO_MAX]``; pass a ``collections.Counter`` as ``diagnostics``
to count clamp events under the key ``"ratio_clamps"``.
"""

from __future__ import annotations

import json
from collections import Counter

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .core_data import subset_mask

RATIO_MIN = 1e-6
RATIO_MAX = 1e6
_LOG_2PI = np.log(2 * np.pi)
_LOG_MIN = np.log(RATIO_MIN)
_LOG_MAX = np.log(RATIO_MAX)


class ModelError(RuntimeError):
    """Raised when a covariance cannot be factorized or a density is not finite."""


class GaussianCovariateModel:
    """Multivariate normal ``N(mean, cov)`` with a Cholesky factor.

    Treated as immutable after construction; block factorizations are cached.
    """

    def __init__(self, mean, cov, jitter: float = 0.0):
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("cov must be symmetric")
        self.mean = mean
        self.cov = 0.5 * (cov + cov.T)
        self.jitter = float(jitter)
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ModelError("covariance is not positive definite") from None
        self._blocks: dict[int, tuple] = {}
        self._conditionals: dict[int, tuple] = {}

    @property
    def d(self) -> int:
        return self.mean.size

    def _block(self, mask: np.ndarray):
        key = int(np.dot(mask, 1 << np.arange(self.d)))
        if key not in self._blocks:
            idx = np.flatnonzero(mask)
            sub = self.cov[np.ix_(idx, idx)]
            L = np.linalg.cholesky(sub)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            self._blocks[key] = (idx, L, logdet)
        return self._blocks[key]

    def log_density(self, x, mask=None) -> np.ndarray:
        """Log-density of the marginal on the coordinates in ``mask`` (all if None).

        ``x`` holds full-length rows; only the masked coordinates are read.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if mask is None:
            mask = np.ones(self.d, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return np.zeros(x.shape[0])
        idx, L, logdet = self._block(mask)
        centered = x[:, idx] - self.mean[idx]
        z = solve_triangular(L, centered.T, lower=True)
        return -0.5 * (np.sum(z * z, axis=0) + logdet + idx.size * _LOG_2PI)

    def conditional(self, mask):
        """Return ``(gain, cond_chol, idx_in, idx_out)`` for ``X_{-S} | X_S``.

        The conditional mean is ``mean_out + gain @ (x_S - mean_in)``.
        """
        mask = np.asarray(mask, dtype=bool)
        key = int(np.dot(mask, 1 << np.arange(self.d)))
        if key not in self._conditionals:
            idx_in = np.flatnonzero(mask)
            idx_out = np.flatnonzero(~mask)
            if idx_out.size == 0:
                raise ValueError("conditioning on every coordinate leaves nothing to sample")
            s_oo = self.cov[np.ix_(idx_out, idx_out)]
            if idx_in.size:
                s_ii = self.cov[np.ix_(idx_in, idx_in)]
                s_oi = self.cov[np.ix_(idx_out, idx_in)]
                try:
                    factor = np.linalg.cholesky(s_ii)
                except np.linalg.LinAlgError:
                    raise ModelError("singular conditioning block") from None
                gain = cho_solve((factor, True), s_oi.T).T
                cond = s_oo - gain @ s_oi.T
            else:
                gain = np.zeros((idx_out.size, 0))
                cond = s_oo
            cond = 0.5 * (cond + cond.T)
            try:
                cond_chol = np.linalg.cholesky(cond)
            except np.linalg.LinAlgError:
                cond_chol = np.linalg.cholesky(cond + 1e-12 * np.trace(cond) / cond.shape[0] * np.eye(cond.shape[0]))
            self._conditionals[key] = (gain, cond_chol, idx_in, idx_out)
        return self._conditionals[key]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.d)) @ self.chol.T

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "cov": self.cov.tolist(), "jitter": self.jitter})

    @classmethod
    def from_json(cls, text: str) -> "GaussianCovariateModel":
        obj = json.loads(text)
        return cls(obj["mean"], obj["cov"], obj.get("jitter", 0.0))


def fit_gaussian(x, jitter: float | None = None, max_retries: int = 3) -> GaussianCovariateModel:
    """Sample mean and unbiased sample covariance plus ``jitter * I``.

    The default jitter is ``1e-6`` times the mean diagonal of the sample
    covariance. On factorization failure the jitter grows tenfold, at most
    ``max_retries`` times.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    if jitter is None:
        scale = np.mean(np.diag(cov))
        jitter = 1e-6 * (scale if scale > 0 else 1.0)
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    eye = np.eye(x.shape[1])
    for attempt in range(max_retries + 1):
        try:
            return GaussianCovariateModel(mean, cov + jitter * eye, jitter)
        except ModelError:
            if attempt == max_retries:
                break
            jitter = jitter * 10 if jitter > 0 else 1e-10
    raise ModelError(f"covariance factorization failed with jitter up to {jitter:g}")


def random_covariance(d: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    """``Q diag(lam) Q^T`` with ``Q`` from the QR of a Gaussian matrix, ``lam ~ U(1-spread, 1+spread)``."""
    if not 0 < spread < 1:
        raise ValueError(f"spread must lie in (0, 1), got {spread}")
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = rng.uniform(1 - spread, 1 + spread, size=d)
    sigma = (q * lam) @ q.T
    return 0.5 * (sigma + sigma.T)


def _clamped_exp(log_ratio: np.ndarray, diagnostics: Counter | None) -> np.ndarray:
    """Exponentiate after clamping to ``[log RATIO_MIN, log RATIO_MAX]``; count clamp events."""
    if not np.all(np.isfinite(log_ratio)):
        raise ModelError("non-finite density ratio")
    clipped = np.clip(log_ratio, _LOG_MIN, _LOG_MAX)
    if diagnostics is not None:
        diagnostics["ratio_clamps"] += int(np.count_nonzero(clipped != log_ratio))
    return np.exp(clipped)


def _as_mask(S, d: int) -> np.ndarray:
    S = np.asarray(S)
    return S if S.dtype == bool else subset_mask(int(S), d)


def log_omega_s(model: GaussianCovariateModel, x, S) -> np.ndarray:
    mask = _as_mask(S, model.d)
    if mask.all() or not mask.any():
        return np.zeros(np.atleast_2d(x).shape[0])
    return model.log_density(x, mask) + model.log_density(x, ~mask) - model.log_density(x)


def omega_s(model: GaussianCovariateModel, x, S, diagnostics: Counter | None = None):
    """Ratio ``p_S(x_S) p_{-S}(x_{-S}) / p(x)`` evaluated row-wise."""
    scalar = np.ndim(x) == 1
    out = _clamped_exp(log_omega_s(model, x, S), diagnostics)
    return float(out[0]) if scalar else out


def log_zeta_s(model: GaussianCovariateModel, x, x_prime, S) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_prime = np.atleast_2d(np.asarray(x_prime, dtype=float))
    mask = _as_mask(S, model.d)
    if mask.all() or not mask.any():
        return np.zeros(max(x.shape[0], x_prime.shape[0]))
    mixed = np.where(mask, x, x_prime)
    return (
        model.log_density(mixed)
        - model.log_density(x)
        + model.log_density(x, ~mask)
        - model.log_density(x_prime, ~mask)
    )


def zeta_s(model: GaussianCovariateModel, x, x_prime, S, diagnostics: Counter | None = None):
    """Change-of-measure weight ``p(x_S, x'_{-S}) / p(x) * p_{-S}(x_{-S}) / p_{-S}(x'_{-S})``."""
    scalar = np.ndim(x) == 1 and np.ndim(x_prime) == 1
    out = _clamped_exp(log_zeta_s(model, x, x_prime, S), diagnostics)
    return float(out[0]) if scalar else out


def conditional_sample(model: GaussianCovariateModel, S, x_s, k: int, rng: np.random.Generator,
                       base=None) -> np.ndarray:
    """Draw ``k`` samples of ``X_{-S} | X_S = x_s``.

    ``x_s`` is a ``|S|``-vector (returns ``(k, d-|S|)``) or an ``(m, |S|)``
    batch (returns ``(m, k, d-|S|)``). Rows get independent draws unless
    ``base`` supplies standard-normal draws of shape ``(k, d-|S|)``, which are
    then shared by every row (common random numbers).
    """
    x_s = np.asarray(x_s, dtype=float)
    single = x_s.ndim <= 1
    x_s = x_s.reshape(1, -1) if single else x_s
    if base is None:
        cond_mean, _ = conditional_parts(model, S, x_s)
        cond_chol = model.conditional(_as_mask(S, model.d))[1]
        noise = rng.standard_normal((x_s.shape[0], k, cond_mean.shape[1])) @ cond_chol.T
    else:
        cond_mean, shared = conditional_parts(model, S, x_s, base)
        noise = shared[None, :, :]
    draws = cond_mean[:, None, :] + noise
    return draws[0] if single else draws


def conditional_parts(model: GaussianCovariateModel, S, x_s, base=None):
    """Conditional means ``(m, d-|S|)`` for a batch ``x_s`` and, given ``base``, the shared noise ``(k, d-|S|)``.

    Draws with common random numbers are ``mean[i] + noise[j]``.
    """
    mask = _as_mask(S, model.d)
    gain, cond_chol, idx_in, idx_out = model.conditional(mask)
    x_s = np.atleast_2d(np.asarray(x_s, dtype=float))
    if x_s.shape[1] != idx_in.size:
        raise ValueError(f"x_s has {x_s.shape[1]} coordinates, S has {idx_in.size}")
    cond_mean = model.mean[idx_out] + (x_s - model.mean[idx_in]) @ gain.T
    noise = None if base is None else np.asarray(base, dtype=float) @ cond_chol.T
    return cond_mean, noise
