"""Regression function classes used for the outcome regression and the SHAP curve.

Four model kinds share one prediction interface:

* ``linear``      -- affine map ``c + b.x``
* ``ridge_rff``   -- random cosine features with a ridge-penalized linear readout
* ``feedforward`` -- ReLU multilayer perceptron trained with Adam
* ``tabulated``   -- nearest-neighbour lookup into stored values

Every model optionally clips its output to ``[-clip, clip]``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .core_data import Dataset

FORMAT_VERSION = 1


class FitError(RuntimeError):
    """Raised when a learner fails to produce finite parameters."""


@dataclass(frozen=True)
class LearnerConfig:
    kind: str = "ridge_rff"
    # ridge_rff
    n_features: int = 300
    bandwidth: float = 1.0
    ridge: float = 1e-3
    # feedforward
    hidden: tuple = (128, 128, 128)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 128
    # "auto" clips at 3 * max|y| of the training targets; None disables clipping
    clip: float | str | None = "auto"

    def __post_init__(self):
        if self.kind not in ("ridge_rff", "feedforward", "linear"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        positive = [self.n_features, self.bandwidth, self.learning_rate, self.batch_size, self.epochs]
        if any(v <= 0 for v in positive) or self.ridge < 0 or self.weight_decay < 0:
            raise ValueError("learner hyperparameters must be positive")
        if any(int(h) <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def from_dict(cls, obj: dict) -> "LearnerConfig":
        obj = dict(obj)
        if "hidden" in obj:
            obj["hidden"] = tuple(obj["hidden"])
        return cls(**obj)


def resolve_clip(clip, targets) -> float | None:
    if clip is None:
        return None
    if clip == "auto":
        bound = 3.0 * float(np.max(np.abs(targets))) if len(targets) else 0.0
        return bound if bound > 0 else None
    return float(clip)


class RegressionModel:
    """Base class: subclasses implement ``_raw`` and the parameter serialization."""

    kind = "base"

    def __init__(self, input_dim: int, clip: float | None = None):
        self.input_dim = int(input_dim)
        self.clip = None if clip is None else float(clip)

    def _raw(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x, diagnostics: Counter | None = None):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x.reshape(-1, x.shape[-1])
        if x2.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} inputs, got {x2.shape[1]}")
        out = self._clipped(self._raw(x2), diagnostics)
        if single:
            return float(out[0])
        return out.reshape(x.shape[:-1])

    __call__ = predict

    def _clipped(self, out, diagnostics):
        if self.clip is not None:
            clipped = np.clip(out, -self.clip, self.clip)
            if diagnostics is not None:
                diagnostics["prediction_clips"] += int(np.count_nonzero(clipped != out))
            out = clipped
        return out

    def _raw_grid(self, p, q):
        rows = p[:, None, :] + q[None, :, :]
        return self._raw(rows.reshape(-1, self.input_dim)).reshape(p.shape[0], q.shape[0])

    def predict_grid(self, p, q, diagnostics: Counter | None = None) -> np.ndarray:
        """Predictions at every ``p[i] + q[j]``, shape ``(len(p), len(q))``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if p.shape[1] != self.input_dim or q.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} inputs")
        return self._clipped(self._raw_grid(p, q), diagnostics)

    def _params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "input_dim": self.input_dim,
            "clip": self.clip,
            "params": self._params(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class LinearModel(RegressionModel):
    kind = "linear"

    def __init__(self, coef, intercept: float = 0.0, clip=None):
        coef = np.asarray(coef, dtype=float).reshape(-1)
        super().__init__(coef.size, clip)
        self.coef = coef
        self.intercept = float(intercept)

    def _raw(self, x):
        return x @ self.coef + self.intercept

    def _raw_grid(self, p, q):
        return (p @ self.coef + self.intercept)[:, None] + (q @ self.coef)[None, :]

    def features(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.hstack([np.ones((x.shape[0], 1)), x])

    def with_params(self, theta, clip=None) -> "LinearModel":
        return LinearModel(theta[1:], theta[0], clip)

    def outer_factors(self, x, mask):
        """Factors with ``raw(mix(x_i, x_j, mask)) = Re(L[i] @ R[j])``."""
        mask = np.asarray(mask, dtype=bool)
        left = x[:, mask] @ self.coef[mask] + self.intercept
        right = x[:, ~mask] @ self.coef[~mask]
        ones = np.ones(x.shape[0])
        return np.column_stack([left, ones]), np.column_stack([ones, right])

    def raw_bound(self, x) -> float:
        """Upper bound of ``|raw|`` over every coordinate mixture of the rows of ``x``."""
        return abs(self.intercept) + float(np.abs(self.coef) @ np.max(np.abs(x), axis=0))

    def _params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept}


class RidgeRFFModel(RegressionModel):
    """``intercept + sum_k coef_k cos(omega_k . x + phase_k)``."""

    kind = "ridge_rff"

    def __init__(self, omega, phase, coef, intercept: float = 0.0, clip=None):
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        super().__init__(omega.shape[1], clip)
        self.omega = omega
        self.phase = np.asarray(phase, dtype=float).reshape(-1)
        self.coef = np.asarray(coef, dtype=float).reshape(-1)
        self.intercept = float(intercept)

    def _raw(self, x):
        return np.cos(x @ self.omega.T + self.phase) @ self.coef + self.intercept

    def _raw_grid(self, p, q):
        # cos(u + v) = cos u cos v - sin u sin v turns the grid into two matrix products
        u = p @ self.omega.T + self.phase
        v = q @ self.omega.T
        return (np.cos(u) * self.coef) @ np.cos(v).T - (np.sin(u) * self.coef) @ np.sin(v).T + self.intercept

    def features(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.hstack([np.ones((x.shape[0], 1)), np.cos(x @ self.omega.T + self.phase)])

    def with_params(self, theta, clip=None) -> "RidgeRFFModel":
        return RidgeRFFModel(self.omega, self.phase, theta[1:], theta[0], clip)

    def outer_factors(self, x, mask):
        mask = np.asarray(mask, dtype=bool)
        left = self.coef * np.exp(1j * (x[:, mask] @ self.omega[:, mask].T))
        right = np.exp(1j * (x[:, ~mask] @ self.omega[:, ~mask].T + self.phase))
        n = x.shape[0]
        left = np.column_stack([np.full(n, self.intercept, dtype=complex), left])
        right = np.column_stack([np.ones(n, dtype=complex), right])
        return left, right

    def raw_bound(self, x) -> float:
        return abs(self.intercept) + float(np.sum(np.abs(self.coef)))

    def _params(self):
        return {
            "omega": self.omega.ravel().tolist(),
            "n_features": self.omega.shape[0],
            "phase": self.phase.tolist(),
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
        }


class FeedforwardModel(RegressionModel):
    """ReLU network on standardized inputs with an affine output rescaling."""

    kind = "feedforward"

    def __init__(self, weights, biases, in_mean, in_scale, out_mean=0.0, out_scale=1.0, clip=None):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        super().__init__(self.weights[0].shape[0], clip)
        self.in_mean = np.asarray(in_mean, dtype=float)
        self.in_scale = np.asarray(in_scale, dtype=float)
        self.out_mean = float(out_mean)
        self.out_scale = float(out_scale)

    def _raw(self, x):
        h = (x - self.in_mean) / self.in_scale
        out = mlp_forward(self.weights, self.biases, h)[0]
        return self.out_mean + self.out_scale * out

    def _params(self):
        return {
            "shapes": [list(w.shape) for w in self.weights],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_mean": self.out_mean,
            "out_scale": self.out_scale,
        }


class TabulatedModel(RegressionModel):
    """Returns the value stored at the nearest tabulated point."""

    kind = "tabulated"

    def __init__(self, points, values, clip=None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        super().__init__(points.shape[1], clip)
        self.points = points
        self.values = np.asarray(values, dtype=float).reshape(-1)
        self._tree = cKDTree(points)

    def _raw(self, x):
        _, idx = self._tree.query(x)
        return self.values[idx]

    def _params(self):
        return {"points": self.points.tolist(), "values": self.values.tolist()}


def predict(model: RegressionModel, x, diagnostics: Counter | None = None):
    return model.predict(x, diagnostics)


def model_from_dict(obj: dict) -> RegressionModel:
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {obj.get('format_version')}")
    kind, p, clip = obj["kind"], obj["params"], obj.get("clip")
    if kind == "linear":
        return LinearModel(p["coef"], p["intercept"], clip)
    if kind == "ridge_rff":
        omega = np.asarray(p["omega"]).reshape(p["n_features"], obj["input_dim"])
        return RidgeRFFModel(omega, p["phase"], p["coef"], p["intercept"], clip)
    if kind == "feedforward":
        weights = [np.asarray(w).reshape(s) for w, s in zip(p["weights"], p["shapes"])]
        return FeedforwardModel(weights, p["biases"], p["in_mean"], p["in_scale"],
                                p["out_mean"], p["out_scale"], clip)
    if kind == "tabulated":
        return TabulatedModel(p["points"], p["values"], clip)
    raise ValueError(f"unknown model kind {kind!r}")


def model_from_json(text: str) -> RegressionModel:
    return model_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# linear-in-parameters fits


def solve_penalized(gram, target, ridge: float) -> np.ndarray:
    """Solve ``(gram + ridge * P) theta = target`` with ``P`` = identity except the intercept slot."""
    penalty = np.full(gram.shape[0], ridge)
    penalty[0] = 0.0
    lhs = gram + np.diag(penalty)
    try:
        return linalg.solve(lhs, target, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise FitError(f"singular normal equations: {exc}") from None


def draw_rff(x_train, cfg: LearnerConfig, rng: np.random.Generator) -> tuple[RidgeRFFModel, float]:
    """Cosine features on standardized inputs, folded back into raw-input units.

    Frequencies are ``N(0, bandwidth^-2 I)`` and phases ``U[0, 2 pi)``. Returns
    a model with zero readout weights and the feature amplitude ``sqrt(2/m)``.
    """
    x_train = np.atleast_2d(x_train)
    d = x_train.shape[1]
    center = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale == 0] = 1.0
    freq = rng.standard_normal((cfg.n_features, d)) / cfg.bandwidth
    phase = rng.uniform(0.0, 2 * np.pi, size=cfg.n_features)
    omega = freq / scale
    phase = phase - omega @ center
    amp = np.sqrt(2.0 / cfg.n_features)
    # amplitude is carried by the readout weights, so features() stays unscaled
    return RidgeRFFModel(omega, phase, np.zeros(cfg.n_features), 0.0), amp


def fit_ridge_rff(data: Dataset, cfg: LearnerConfig, rng: np.random.Generator) -> RidgeRFFModel:
    """Ridge regression on random cosine features.

    Minimizes ``(1/2n) |y - F theta|^2 + (ridge/2) |w|^2`` where the intercept
    is unpenalized and ``w`` are the feature weights.
    """
    base, amp = draw_rff(data.x, cfg, rng)
    F = base.features(data.x)
    F[:, 1:] *= amp
    n = data.n
    theta = solve_penalized(F.T @ F / n, F.T @ data.y / n, cfg.ridge)
    if not np.all(np.isfinite(theta)):
        raise FitError("ridge solution is not finite")
    theta[1:] *= amp
    return base.with_params(theta, resolve_clip(cfg.clip, data.y))


def fit_linear(data: Dataset, cfg: LearnerConfig | None = None, rng=None) -> LinearModel:
    """Least squares with an intercept and a small ridge on the slopes."""
    cfg = cfg or LearnerConfig(kind="linear", ridge=1e-8)
    F = np.hstack([np.ones((data.n, 1)), data.x])
    theta = solve_penalized(F.T @ F / data.n, F.T @ data.y / data.n, cfg.ridge)
    return LinearModel(theta[1:], theta[0], resolve_clip(cfg.clip, data.y))


# ---------------------------------------------------------------------------
# multilayer perceptron


def init_mlp(sizes, rng: np.random.Generator):
    """Uniform ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` initialization of weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return weights, biases


def mlp_forward(weights, biases, x):
    """Return the scalar output per row and the activations needed for backprop."""
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h[:, 0], acts


def mlp_backward(weights, acts, grad_out):
    """Gradients of ``sum(grad_out * output)`` with respect to weights and biases."""
    g = grad_out[:, None]
    gw, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[i].T) * (acts[i] > 0)
    return gw, gb


class Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_mlp(weights, biases, n_rows: int, batch_grad, cfg: LearnerConfig, rng: np.random.Generator):
    """Mini-batch Adam over a seeded per-epoch shuffle.

    ``batch_grad(idx, epoch)`` returns ``(loss, grad_w, grad_b)`` for the rows
    ``idx``. Returns the per-epoch mean loss trace.
    """
    params = list(weights) + list(biases)
    opt = Adam(params, cfg.learning_rate, cfg.weight_decay)
    nl = len(weights)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = batch_grad(idx, epoch)
            if not np.isfinite(loss):
                raise FitError(f"non-finite training loss at epoch {epoch}")
            total += loss * idx.size
            opt.step(list(gw) + list(gb))
        trace.append(total / n_rows)
    return params[:nl], params[nl:], trace


def standardizer(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def fit_feedforward(data: Dataset, cfg: LearnerConfig, rng: np.random.Generator,
                    return_trace: bool = False):
    """Squared-error regression with a ReLU MLP (identity output layer)."""
    in_mean, in_scale = standardizer(data.x)
    out_mean = float(data.y.mean())
    out_scale = float(data.y.std()) or 1.0
    h = (data.x - in_mean) / in_scale
    t = (data.y - out_mean) / out_scale
    weights, biases = init_mlp([data.d, *cfg.hidden, 1], rng)

    def batch_grad(idx, epoch):
        out, acts = mlp_forward(weights, biases, h[idx])
        resid = out - t[idx]
        gw, gb = mlp_backward(weights, acts, resid / idx.size)
        return 0.5 * float(np.mean(resid ** 2)), gw, gb

    weights, biases, trace = train_mlp(weights, biases, data.n, batch_grad, cfg, rng)
    model = FeedforwardModel(weights, biases, in_mean, in_scale, out_mean, out_scale,
                             resolve_clip(cfg.clip, data.y))
    if return_trace:
        return model, [2.0 * v * out_scale ** 2 for v in trace]
    return model


def fit_learner(data: Dataset, cfg: LearnerConfig, rng: np.random.Generator) -> RegressionModel:
    if cfg.kind == "ridge_rff":
        return fit_ridge_rff(data, cfg, rng)
    if cfg.kind == "feedforward":
        return fit_feedforward(data, cfg, rng)
    return fit_linear(data, cfg, rng)


def linear_config(**kw) -> LearnerConfig:
    return replace(LearnerConfig(kind="linear", ridge=1e-8), **kw)


def config_to_dict(cfg: LearnerConfig) -> dict:
    out = asdict(cfg)
    out["hidden"] = list(cfg.hidden)
    return out

