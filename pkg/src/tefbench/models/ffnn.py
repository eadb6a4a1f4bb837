"""Small feed-forward detector (input -> 64 -> 64 -> 1) with manual backprop.

Trained by minibatch SGD with momentum on logistic loss. The analytic
gradients are exposed through :func:`loss_and_grad` so they can be checked
against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceDetected

HIDDEN = (64, 64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # deliberately unguarded: saturating to exactly 0/1 lets a diverging run
    # surface as a non-finite loss instead of being masked
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class FfnnConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    activation: str = "relu"  # or "tanh"
    seed: int = 0


@dataclass
class FfnnModel:
    params: dict[str, np.ndarray]
    activation: str = "relu"
    train_losses: list[float] = field(default_factory=list)

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        margin, _ = _forward(self.params, X, self.activation)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_margin(X))


def init_params(n_features: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    sizes = (n_features,) + HIDDEN + (1,)
    params = {}
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"W{i + 1}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
        params[f"b{i + 1}"] = np.zeros(fan_out)
    return params


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0).astype(np.float64)


def _forward(params: dict[str, np.ndarray], X: np.ndarray, kind: str):
    z1 = X @ params["W1"] + params["b1"]
    a1 = _act(z1, kind)
    z2 = a1 @ params["W2"] + params["b2"]
    a2 = _act(z2, kind)
    z3 = a2 @ params["W3"] + params["b3"]
    return z3[:, 0], (X, z1, a1, z2, a2)


def loss_and_grad(params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray,
                  sample_weight: np.ndarray | None = None, activation: str = "relu"):
    """Weighted logistic loss and its gradient w.r.t. every parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    wsum = w.sum()
    margin, (X0, z1, a1, z2, a2) = _forward(params, X, activation)
    p = _sigmoid(margin)
    with np.errstate(divide="ignore"):
        per_sample = np.where(y == 1.0, -np.log(p), -np.log(1.0 - p))
    loss = float(np.dot(per_sample, w) / wsum)

    dz3 = ((p - y) * w / wsum)[:, None]
    grads = {
        "W3": a2.T @ dz3,
        "b3": dz3.sum(axis=0),
    }
    da2 = dz3 @ params["W3"].T
    dz2 = da2 * _act_grad(z2, activation)
    grads["W2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ params["W2"].T
    dz1 = da1 * _act_grad(z1, activation)
    grads["W1"] = X0.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def train_ffnn(X: np.ndarray, y: np.ndarray, cfg: FfnnConfig | None = None,
               sample_weight: np.ndarray | None = None) -> FfnnModel:
    """Minibatch SGD with momentum 0.9; zero epochs returns the initialized net."""
    cfg = cfg or FfnnConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(X.shape[1], rng)
    model = FfnnModel(params, cfg.activation)
    loss0, _ = loss_and_grad(params, X, y, w, cfg.activation)
    model.train_losses.append(loss0)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(params, X[idx], y[idx], w[idx], cfg.activation)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite minibatch loss {loss}")
            for k in params:
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[k]
                params[k] = params[k] + velocity[k]
        epoch_loss, _ = loss_and_grad(params, X, y, w, cfg.activation)
        if not np.isfinite(epoch_loss):
            raise DivergenceDetected(f"non-finite epoch loss {epoch_loss}")
        model.train_losses.append(epoch_loss)
    return model
