"""Logistic-regression detector trained by full-batch gradient descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


@dataclass(frozen=True)
class LinearConfig:
    epochs: int = 400
    learning_rate: float = 2.0
    momentum: float = 0.9
    l2: float = 1e-4
    seed: int = 0


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_margin(X))


def train_linear(X: np.ndarray, y: np.ndarray, cfg: LinearConfig | None = None,
                 sample_weight: np.ndarray | None = None) -> LinearModel:
    cfg = cfg or LinearConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    prior = float(np.dot(y, w) / w.sum())
    prior = min(max(prior, 1e-6), 1 - 1e-6)
    bias = float(np.log(prior / (1 - prior)))
    if prior in (1e-6, 1 - 1e-6):
        return LinearModel(np.zeros(X.shape[1]), bias)
    weights = np.zeros(X.shape[1])
    vel_w = np.zeros_like(weights)
    vel_b = 0.0
    wsum = w.sum()
    for _ in range(cfg.epochs):
        p = _sigmoid(X @ weights + bias)
        err = (p - y) * w / wsum
        grad_w = X.T @ err + cfg.l2 * weights
        grad_b = float(err.sum())
        vel_w = cfg.momentum * vel_w - cfg.learning_rate * grad_w
        vel_b = cfg.momentum * vel_b - cfg.learning_rate * grad_b
        weights = weights + vel_w
        bias = bias + vel_b
    return LinearModel(weights, float(bias))
