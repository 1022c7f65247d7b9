"""Tanh-smoothed absolute powers ``|u|^p tanh(beta |u|^{2-p})`` for ``1 <= p < 2``.

The surrogate is twice continuously differentiable with ``varphi''(0) = 2 beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# beyond this argument tanh == 1 and sech^2 == 0 in double precision
_SATURATION = 40.0


@dataclass(frozen=True)
class SmoothingSpec:
    p: float
    beta: float

    def __post_init__(self):
        if not 1 <= self.p < 2:
            raise ValueError(f"smoothing needs 1 <= p < 2, got p={self.p}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def _parts(spec: SmoothingSpec, u):
    au = np.abs(np.asarray(u, dtype=float))
    arg = spec.beta * au ** (2 - spec.p)
    saturated = arg > _SATURATION
    safe = np.where(saturated, 0.0, arg)
    th = np.where(saturated, 1.0, np.tanh(safe))
    sech2 = np.where(saturated, 0.0, 1.0 / np.cosh(safe) ** 2)
    return au, arg, th, sech2


def _out(values, u):
    return float(values) if np.ndim(u) == 0 else values


def varphi(spec: SmoothingSpec, u):
    au, _, th, _ = _parts(spec, u)
    return _out(au ** spec.p * th, u)


def varphi_prime(spec: SmoothingSpec, u):
    p, beta = spec.p, spec.beta
    au, _, th, sech2 = _parts(spec, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        mag = p * au ** (p - 1) * th + beta * (2 - p) * au * sech2
    val = np.sign(u) * np.where(au == 0, 0.0, mag)
    return _out(val, u)


def varphi_second(spec: SmoothingSpec, u):
    p, beta = spec.p, spec.beta
    au, arg, th, sech2 = _parts(spec, u)
    # |u|^(p-2) tanh(arg) = beta * tanh(arg)/arg, which stays finite as u -> 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(arg > 0, th / arg, 1.0)
    t1 = p * (p - 1) * beta * ratio
    t2 = beta * (2 - p) * (p + 1) * sech2
    t3 = 2 * beta * (2 - p) ** 2 * arg * sech2 * th
    val = np.where(au == 0, 2.0 * beta, t1 + t2 - t3)
    return _out(val, u)


def admissible_exponents(p: float, delta: float) -> tuple[float, float]:
    """Open interval of growth exponents ``r`` for ``beta_n = c n^r``."""
    return (2 - p) / (2 * (p + delta)), 0.5


@dataclass(frozen=True)
class BetaSchedule:
    """``beta_n = c * n^r`` with ``r`` strictly inside the admissible interval.

    ``r`` defaults to the midpoint of the interval; ``delta`` is the margin
    exponent of the density of ``|phi(X)|`` near zero.
    """

    p: float
    delta: float = 1.0
    c: float = 1.0
    r: float | None = None

    def __post_init__(self):
        if not 1 <= self.p < 2:
            raise ValueError(f"the schedule is defined for 1 <= p < 2, got {self.p}")
        if self.delta <= 0 or self.c <= 0:
            raise ValueError("delta and c must be positive")
        lo, hi = admissible_exponents(self.p, self.delta)
        if self.r is None:
            object.__setattr__(self, "r", 0.5 * (lo + hi))
        elif not lo < self.r < hi:
            raise ValueError(f"exponent r={self.r} outside the admissible interval ({lo:.4g}, {hi})")


def beta_for_n(schedule: BetaSchedule, n: int) -> float:
    if n < 2:
        raise ValueError("the schedule needs n >= 2")
    return float(schedule.c * n ** schedule.r)


def bias_envelope(p: float, delta: float, beta: float) -> float:
    """Unscaled smoothing-bias power law ``(1/beta)^((p+delta)/(2-p))``."""
    return float((1.0 / beta) ** ((p + delta) / (2 - p)))
