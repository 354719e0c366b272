"""Baseline demand forecaster: a plain fully connected net in numpy.

Forward, exact reverse-mode gradients, and Adam are written out explicitly so
the trainer can mix these gradients with the implicit ones coming out of the
agent module.  Hidden layers use ReLU (identity is available for closed-form
gradient tests), the output layer is linear and emits the whole horizon at
once.  There is no training-mode state of any kind: forward is a pure
function of (params, x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InsufficientData, ShapeMismatch

STD_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


@dataclass
class BaselineNetParams:
    weights: list          # [(m,h1), (h1,h2), ..., (hk,T)]
    biases: list           # [(h1,), ..., (T,)]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    activation: str = "relu"

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def horizon(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def copy(self) -> "BaselineNetParams":
        return BaselineNetParams([w.copy() for w in self.weights],
                                 [b.copy() for b in self.biases],
                                 self.feat_mean.copy(), self.feat_std.copy(),
                                 self.activation)


def init_baseline_net(n_features, hidden_sizes, horizon, rng,
                      activation="relu") -> BaselineNetParams:
    """Uniform fan-in-scaled initialization, seeded by the caller's generator."""
    sizes = [n_features, *hidden_sizes, horizon]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return BaselineNetParams(weights, biases,
                             np.zeros(n_features), np.ones(n_features), activation)


def fit_normalization(features: np.ndarray):
    """Per-feature mean and population std (floored) from a training matrix."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientData("need a 2-D feature matrix with at least 2 rows")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _forward_cached(params: BaselineNetParams, x: np.ndarray):
    """Forward pass keeping the per-layer inputs needed by backward."""
    h = (x - params.feat_mean) / params.feat_std
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else _activate(z, params.activation)
        cache.append(h)
    return h, cache


def forward(params: BaselineNetParams, x) -> np.ndarray:
    """Predicted baseline for one feature vector (m,) or a batch (N, m)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_features:
        raise DimensionMismatch(
            f"input has {x.shape[-1]} features, model expects {params.n_features}")
    out, _ = _forward_cached(params, x)
    return out


def backward(params: BaselineNetParams, x, upstream):
    """Exact reverse-mode gradients of upstream . output.

    upstream matches the output shape; with a batch, parameter gradients are
    summed over the rows.  Returns (grads, grad_x) where grads mirrors the
    (weights, biases) structure.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(upstream, dtype=float)
    if x.shape[-1] != params.n_features:
        raise DimensionMismatch(
            f"input has {x.shape[-1]} features, model expects {params.n_features}")
    single = x.ndim == 1
    xb = x[None] if single else x
    ub = u[None] if single else u
    if ub.shape != (xb.shape[0], params.horizon):
        raise DimensionMismatch(
            f"upstream has shape {u.shape}, expected ({xb.shape[0]}, {params.horizon})")

    _, cache = _forward_cached(params, xb)
    g_w = [np.zeros_like(w) for w in params.weights]
    g_b = [np.zeros_like(b) for b in params.biases]
    delta = ub
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        h_in = cache[i]
        if i != last and params.activation == "relu":
            delta = delta * (cache[i + 1] > 0)
        g_w[i] = h_in.T @ delta
        g_b[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
    grad_x = delta / params.feat_std  # undo the input normalization scaling
    return (g_w, g_b), (grad_x[0] if single else grad_x)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(arrays, lr) -> AdamState:
    return AdamState(lr=lr, m=[np.zeros_like(a) for a in arrays],
                     v=[np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, arrays, grads):
    """One Adam update; returns the updated arrays, advancing the state."""
    if len(arrays) != len(state.m) or len(grads) != len(arrays):
        raise ShapeMismatch("parameter/gradient count does not match optimizer state")
    for a, g, m in zip(arrays, grads, state.m):
        if a.shape != g.shape or a.shape != m.shape:
            raise ShapeMismatch(f"shape {g.shape} does not match parameter {a.shape}")
    state.step += 1
    t = state.step
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1 ** t)
        v_hat = state.v[i] / (1 - state.beta2 ** t)
        out.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def flatten_params(params: BaselineNetParams):
    return list(params.weights) + list(params.biases)


def unflatten_params(params: BaselineNetParams, arrays) -> BaselineNetParams:
    k = len(params.weights)
    return BaselineNetParams(list(arrays[:k]), list(arrays[k:]),
                             params.feat_mean, params.feat_std, params.activation)


def save_checkpoint(path, params: BaselineNetParams) -> None:
    """Single-file checkpoint: versioned npz with weights and feature stats."""
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "n_layers": np.array(len(params.weights)),
        "activation": np.array(params.activation),
        "feat_mean": params.feat_mean,
        "feat_std": params.feat_std,
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_checkpoint(path) -> BaselineNetParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n = int(data["n_layers"])
        weights = [data[f"w{i}"] for i in range(n)]
        biases = [data[f"b{i}"] for i in range(n)]
        return BaselineNetParams(weights, biases, data["feat_mean"],
                                 data["feat_std"], str(data["activation"]))
