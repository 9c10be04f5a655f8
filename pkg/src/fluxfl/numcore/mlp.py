"""One-hidden-layer ReLU classifier trained with momentum SGD.

The hidden activations double as the latent representation consumed by the
descriptor extractor, so ``hidden`` is the latent width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ConfigurationError, as_matrix
from .rng import RngStream


class NumericInstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpModel:
    """Weights live in one flat vector, ordered W1 (in x hidden, row-major), b1, W2 (hidden x out), b2."""

    n_in: int
    hidden: int
    n_out: int
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (param_count(self.n_in, self.hidden, self.n_out),):
            raise ConfigurationError(
                f"parameter vector has shape {p.shape}, expected ({param_count(self.n_in, self.hidden, self.n_out)},)"
            )
        object.__setattr__(self, "params", p)

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: RngStream) -> MlpModel:
        # Uniform in +-1/sqrt(fan_in), one draw per parameter in canonical order.
        b1 = 1.0 / np.sqrt(n_in)
        b2 = 1.0 / np.sqrt(hidden)
        n1 = n_in * hidden + hidden
        n2 = hidden * n_out + n_out
        u = rng.uniforms(n1 + n2) * 2.0 - 1.0
        params = np.concatenate([u[:n1] * b1, u[n1:] * b2])
        return cls(n_in, hidden, n_out, params)

    @classmethod
    def zeros(cls, n_in: int, hidden: int, n_out: int) -> MlpModel:
        return cls(n_in, hidden, n_out, np.zeros(param_count(n_in, hidden, n_out)))

    def with_params(self, params: np.ndarray) -> MlpModel:
        return MlpModel(self.n_in, self.hidden, self.n_out, params)

    @property
    def size(self) -> int:
        return self.params.size

    def unpack(self, params: np.ndarray | None = None):
        p = self.params if params is None else params
        i, h, o = self.n_in, self.hidden, self.n_out
        k = 0
        w1 = p[k:k + i * h].reshape(i, h)
        k += i * h
        b1 = p[k:k + h]
        k += h
        w2 = p[k:k + h * o].reshape(h, o)
        k += h * o
        b2 = p[k:k + o]
        return w1, b1, w2, b2


def param_count(n_in: int, hidden: int, n_out: int) -> int:
    return n_in * hidden + hidden + hidden * n_out + n_out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(model: MlpModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, latents)``; latents are the post-ReLU hidden layer."""
    x = as_matrix(x, cols=model.n_in, name="input")
    w1, b1, w2, b2 = model.unpack()
    latents = np.maximum(x @ w1 + b1, 0.0)
    return latents @ w2 + b2, latents


def latents_of(model: MlpModel, x) -> np.ndarray:
    return mlp_forward(model, x)[1]


def predict(model: MlpModel, x) -> np.ndarray:
    return np.argmax(mlp_forward(model, x)[0], axis=1)


def accuracy(model: MlpModel, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return 0.0
    return float(np.mean(predict(model, x) == y))


def loss_and_grad(model: MlpModel, x: np.ndarray, y: np.ndarray,
                  params: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat parameters."""
    w1, b1, w2, b2 = model.unpack(params)
    n = x.shape[0]
    pre = x @ w1 + b1
    hid = np.maximum(pre, 0.0)
    logits = hid @ w2 + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    d_logits = np.exp(shifted - log_norm[:, None])
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    g_w2 = hid.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_hid = (d_logits @ w2.T) * (pre > 0.0)
    g_w1 = x.T @ d_hid
    g_b1 = d_hid.sum(axis=0)
    return loss, np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def loss(model: MlpModel, x, y, params: np.ndarray | None = None) -> float:
    return loss_and_grad(model, np.asarray(x, dtype=np.float64), np.asarray(y), params)[0]


def mlp_train_local(model: MlpModel, features, labels, epochs: int, lr: float,
                    momentum: float, rng: RngStream, batch_size: int = 64) -> MlpModel:
    """Mini-batch SGD with heavy-ball momentum (``v = m*v + g; w -= lr*v``).

    Momentum buffers start at zero on every call, matching a client that
    receives fresh weights each round. Batch order comes from ``rng``.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    x = as_matrix(features, cols=model.n_in, name="features")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ConfigurationError("labels must be a vector matching the feature rows")
    if y.size and (y.min() < 0 or y.max() >= model.n_out):
        raise ConfigurationError(f"labels must lie in [0, {model.n_out})")

    params = model.params.copy()
    velocity = np.zeros_like(params)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            # Overflow is caught by the finiteness check below.
            with np.errstate(over="ignore", invalid="ignore"):
                value, grad = loss_and_grad(model, x[idx], y[idx], params)
            if not np.isfinite(value):
                raise NumericInstabilityError(f"non-finite training loss ({value})")
            velocity = momentum * velocity + grad
            params = params - lr * velocity
    return model.with_params(params)


def weighted_param_mean(params: list[np.ndarray], weights: list[float]) -> np.ndarray:
    """Coordinate-wise weighted mean, accumulated in list order."""
    if len(params) == 0:
        raise ConfigurationError("cannot average an empty list of parameter vectors")
    if len(params) != len(weights):
        raise ConfigurationError("one weight per parameter vector required")
    size = np.asarray(params[0]).shape
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ConfigurationError("weights must be positive")
    total = float(w.sum())
    if total <= 0.0:
        raise ConfigurationError("total weight is zero")
    acc = np.zeros(size)
    for p, wi in zip(params, w):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != size:
            raise ConfigurationError("parameter vectors differ in length")
        acc += wi * p
    return acc / total
