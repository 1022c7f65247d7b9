"""Datasets, feature-subset codes and Shapley weights.

Subsets of ``{0, ..., d-1}`` are encoded as integer bitmasks: bit ``i`` is set
when feature ``i`` belongs to the subset. Feature indices are 0-based in the
library and 1-based in CSV headers and on the command line.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

ENUMERATION_CAP = 15


class DataError(ValueError):
    """Raised when a dataset file or array is malformed."""


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (n x d) and outcomes ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataError(f"x must be 2-dimensional, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if x.shape[0] < 2:
            raise DataError("a dataset needs at least 2 rows")
        if x.shape[1] < 1:
            raise DataError("a dataset needs at least 1 covariate")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite entries")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.x[rows], self.y[rows])


def shapley_weight(d: int, subset_size) -> float | np.ndarray:
    """Weight ``(1/d) * C(d-1, s)^{-1}`` of a coalition of size ``s`` not containing the target.

    Accepts a scalar or an integer array of sizes. Uses log-gamma for ``d > 30``.
    """
    s = np.asarray(subset_size)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if np.any(s < 0) or np.any(s > d - 1):
        raise ValueError(f"subset size must lie in [0, {d - 1}], got {subset_size}")
    if d > 30:
        log_binom = gammaln(d) - gammaln(s + 1) - gammaln(d - s)
        w = np.exp(-log_binom) / d
    elif s.ndim == 0:
        w = 1.0 / (d * math.comb(d - 1, int(s)))
    else:
        w = np.array([1.0 / (d * math.comb(d - 1, int(k))) for k in s.ravel()]).reshape(s.shape)
    return float(w) if np.ndim(w) == 0 else w


def popcount(codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    count = np.zeros(codes.shape, dtype=np.int64)
    c = codes.copy()
    while np.any(c):
        count += c & 1
        c >>= 1
    return count


def enumerate_subsets(d: int, a: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All bitmasks of subsets of ``[d] \\ {a}`` in ascending order."""
    _check_feature(d, a)
    if d > cap:
        raise ValueError(
            f"exact enumeration over 2^{d - 1} subsets exceeds the cap d <= {cap}; "
            "use sampled subsets instead"
        )
    codes = np.arange(1 << d, dtype=np.int64)
    return codes[(codes >> a) & 1 == 0]


def subset_from_indices(indices: Sequence[int]) -> int:
    code = 0
    for i in indices:
        code |= 1 << int(i)
    return code


def subset_to_indices(code: int, d: int) -> tuple[int, ...]:
    return tuple(i for i in range(d) if (int(code) >> i) & 1)


def subset_mask(codes, d: int) -> np.ndarray:
    """Boolean membership array of shape ``codes.shape + (d,)``."""
    codes = np.asarray(codes, dtype=np.int64)
    return ((codes[..., None] >> np.arange(d)) & 1).astype(bool)


@dataclass(frozen=True)
class ShapleyDistribution:
    """The Shapley distribution over subsets of ``[d] \\ {a}``."""

    d: int
    a: int

    def __post_init__(self):
        _check_feature(self.d, self.a)

    @property
    def size_probabilities(self) -> np.ndarray:
        # Each size class s holds C(d-1, s) subsets of weight w(s): total mass 1/d.
        return np.full(self.d, 1.0 / self.d)

    def weight(self, code: int) -> float:
        if (int(code) >> self.a) & 1:
            return 0.0
        return shapley_weight(self.d, int(popcount(code)))


def sample_shapley_subsets(dist: ShapleyDistribution, rng: np.random.Generator, size=None):
    """Draw subset codes with probability ``w(S)``.

    The size is uniform on ``{0, ..., d-1}``; given the size, members are a
    uniformly random subset of the other ``d - 1`` features.
    """
    d, a = dist.d, dist.a
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape)) if shape else 1
    others = np.array([i for i in range(d) if i != a], dtype=np.int64)
    sizes = rng.integers(0, d, size=count)
    if d == 1:
        codes = np.zeros(count, dtype=np.int64)
    else:
        # Random ranks: the `size` smallest keys form a uniform subset of that size.
        keys = rng.random((count, d - 1))
        ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
        chosen = ranks < sizes[:, None]
        codes = (chosen * (np.int64(1) << others)).sum(axis=1)
    return int(codes[0]) if size is None else codes.reshape(shape)


def sample_shapley_subset(dist: ShapleyDistribution, rng: np.random.Generator) -> int:
    return sample_shapley_subsets(dist, rng)


def mix_vectors(x, x_prime, S) -> np.ndarray:
    """Take coordinates in ``S`` from ``x`` and the rest from ``x_prime``.

    ``S`` is a bitmask (int or array of ints broadcasting against the leading
    dimensions) or a boolean membership mask.
    """
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape[-1] != x_prime.shape[-1]:
        raise ValueError(f"length mismatch: {x.shape[-1]} vs {x_prime.shape[-1]}")
    S = np.asarray(S)
    mask = S if S.dtype == bool else subset_mask(S, x.shape[-1])
    return np.where(mask, x, x_prime)


def load_dataset(path) -> Dataset:
    """Read a CSV with header ``x1,...,xd,y``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    expected = [f"x{i + 1}" for i in range(d)] + ["y"]
    if d < 1 or header != expected:
        raise DataError(f"{path}: header must be {','.join(expected) if d >= 1 else 'x1,...,xd,y'}, got {','.join(header)}")
    values = np.empty((len(rows) - 1, d + 1))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != d + 1:
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {d + 1}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[c]}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r}, column {header[c]}: non-finite value {cell!r}")
            values[r - 2, c] = v
    return Dataset(values[:, :d], values[:, d])


def save_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(data.d)] + ["y"])
        for xi, yi in zip(data.x, data.y):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def _check_feature(d: int, a: int) -> None:
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if not 0 <= a < d:
        raise ValueError(f"feature index {a} out of range for d={d}")
