"""Function approximators: a small ReLU MLP with hand-rolled backprop and
Adam, plus ridge-regularized linear least squares.  Everything is plain
numpy float64; model state round-trips losslessly through JSON.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NanGradientError, NumericBlowupError, SingularDesignError


class MLP:
    """Fully connected net, ReLU hidden layers, identity output.

    Weights are stored [fan_in, fan_out] so forward is x @ W + b.
    """

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("layer shape mismatch")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self):
        return self.weights + self.biases


def mlp_init(layer_sizes, rng) -> MLP:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init, seeded."""
    if len(layer_sizes) < 2 or any(n < 1 for n in layer_sizes):
        raise ConfigError(f"bad layer sizes {layer_sizes}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MLP(weights, biases)


def mlp_forward(net: MLP, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single input [d] or a batch [B, d]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def mlp_forward_cached(net: MLP, x: np.ndarray):
    """Batch forward keeping post-activation values for the backward pass."""
    h = np.asarray(x, dtype=np.float64)
    cache = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return h, cache


def mlp_backward(net: MLP, cache, grad_out: np.ndarray):
    """Reverse-mode gradients given d(loss)/d(output) for a cached forward.

    Returns (grad_weights, grad_biases) shaped like the parameters.
    ReLU subgradient at 0 is taken as 0.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        inp = cache[i]
        if i < len(net.weights) - 1:
            g = g * (cache[i + 1] > 0.0)
        grad_w[i] = inp.T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i].T
    return grad_w, grad_b


def mse_loss_grad(net: MLP, x: np.ndarray, target: np.ndarray):
    """Mean-squared-error loss and its parameter gradients.

    Loss = mean over the batch of the squared-error sum across output dims.
    """
    y, cache = mlp_forward_cached(net, x)
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    diff = y - t
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad_out = 2.0 * diff / diff.shape[0]
    gw, gb = mlp_backward(net, cache, grad_out)
    return loss, gw, gb


@dataclass
class AdamState:
    """First/second moment accumulators, one slot per parameter array."""

    lr: float
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params, lr: float) -> "AdamState":
        return AdamState(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params, grads) -> None:
    """One Adam update, in place, with bias-corrected moments."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NanGradientError("nan-gradient: non-finite gradient in Adam step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def fit_mlp(
    x: np.ndarray,
    y: np.ndarray,
    hidden,
    seed: int,
    epochs: int = 40,
    batch_size: int = 128,
    lr: float = 1e-3,
):
    """Train an MLP regressor with shuffled minibatches and Adam.

    Returns (net, per-epoch mean losses).  Deterministic for a fixed seed.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if n == 0:
        raise ConfigError("cannot fit on an empty dataset")
    rng = np.random.default_rng(seed)
    net = mlp_init([x.shape[1], *hidden, y.shape[1]], rng)
    adam = AdamState.for_params(net.params(), lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, gw, gb = mse_loss_grad(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericBlowupError(f"numeric-blowup: loss={loss}")
            adam_step(adam, net.params(), gw + gb)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return net, np.asarray(losses)


@dataclass
class LinearModel:
    """Affine map y = x @ W + b (b = 0 when fit without intercept)."""

    W: np.ndarray
    b: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = (x[None, :] if single else x) @ self.W + self.b
        return out[0] if single else out


def fit_linear(x, y, ridge: float = 0.0, fit_intercept: bool = True) -> LinearModel:
    """Least squares via the normal equations, optional ridge on the weights.

    With one-hot feature blocks an intercept is collinear; pass
    fit_intercept=False there.  Raises on a singular system at ridge=0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    n, d = x.shape
    phi = np.hstack([x, np.ones((n, 1))]) if fit_intercept else x
    a = phi.T @ phi
    if ridge > 0:
        a = a + ridge * np.eye(phi.shape[1])
    try:
        coef = np.linalg.solve(a, phi.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(
            f"singular-design: normal equations singular at ridge={ridge}"
        ) from exc
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularDesignError(
            f"singular-design: condition number {cond:.2e} at ridge={ridge}"
        )
    if fit_intercept:
        return LinearModel(W=coef[:-1], b=coef[-1].copy())
    return LinearModel(W=coef, b=np.zeros(y.shape[1]))


def _model_to_dict(model) -> dict:
    if isinstance(model, MLP):
        return {
            "kind": "mlp",
            "layer_sizes": model.layer_sizes,
            "weights": [w.tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
        }
    if isinstance(model, LinearModel):
        return {
            "kind": "linear",
            "W": model.W.tolist(),
            "b": model.b.tolist(),
        }
    raise ConfigError(f"cannot serialize model of type {type(model).__name__}")


def _model_from_dict(blob: dict):
    kind = blob.get("kind")
    if kind == "mlp":
        net = MLP([np.array(w) for w in blob["weights"]],
                  [np.array(b) for b in blob["biases"]])
        if net.layer_sizes != list(blob["layer_sizes"]):
            raise ConfigError("layer_sizes disagree with stored weights")
        return net
    if kind == "linear":
        return LinearModel(W=np.array(blob["W"]), b=np.array(blob["b"]))
    raise ConfigError(f"unknown model kind {kind!r}")


def save_model(model, path: str, metadata: dict | None = None) -> None:
    """JSON with full float64 precision (repr round trip), atomic write."""
    blob = _model_to_dict(model)
    blob["metadata"] = dict(metadata or {})
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(blob, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str):
    with open(path) as fh:
        blob = json.load(fh)
    return _model_from_dict(blob), blob.get("metadata", {})
