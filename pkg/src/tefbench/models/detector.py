"""Hard-label black-box facade over a trained model, with a query ledger.

Attackers only ever see :meth:`Detector.label` / :meth:`Detector.labels`;
every metered call increments the ledger by exactly one per sample. The
``*_unmetered`` variants exist for the evaluation harness only.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import InsufficientHoldout

MIN_CALIBRATION_SAMPLES = 100


class Detector:
    def __init__(self, model, threshold: float, name: str = "detector"):
        if not (0.0 < threshold < 1.0):
            raise ValueError(f"threshold must lie in (0,1), got {threshold}")
        self.model = model
        self.threshold = float(threshold)
        self.name = name
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._queries

    def _count(self, n: int) -> None:
        with self._lock:
            self._queries += n

    def scores_unmetered(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.model.predict_proba(np.atleast_2d(X)))

    def labels_unmetered(self, X: np.ndarray) -> np.ndarray:
        return (self.scores_unmetered(X) >= self.threshold).astype(np.int64)

    def score(self, x: np.ndarray) -> float:
        self._count(1)
        return float(self.scores_unmetered(x)[0])

    def label(self, x: np.ndarray) -> int:
        self._count(1)
        return int(self.labels_unmetered(x)[0])

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        self._count(X.shape[0])
        return self.scores_unmetered(X)

    def labels(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        self._count(X.shape[0])
        return self.labels_unmetered(X)


def predict_score(detector: Detector, x: np.ndarray) -> float:
    return detector.score(x)


def predict_label(detector: Detector, x: np.ndarray) -> int:
    return detector.label(x)


def calibrate_threshold(model, X_benign_holdout: np.ndarray, fpr_target: float) -> float:
    """Smallest observed score t with empirical FPR(t) = mean(s >= t) <= target."""
    if not (0.0 < fpr_target < 1.0):
        raise ValueError(f"fpr_target must lie in (0,1), got {fpr_target}")
    X = np.atleast_2d(np.asarray(X_benign_holdout))
    n = X.shape[0]
    if n < MIN_CALIBRATION_SAMPLES:
        raise InsufficientHoldout(f"need >= {MIN_CALIBRATION_SAMPLES} benign samples, got {n}")
    s = np.sort(np.asarray(model.predict_proba(X)))
    k = int(np.floor(n * fpr_target + 1e-9))  # allowed false positives
    if k >= n:
        return float(s[0])
    if k == 0:
        t = float(np.nextafter(s[-1], np.inf))
    else:
        j = n - k
        if s[j - 1] < s[j]:
            t = float(s[j])
        else:
            # ties span the cut; the next strictly larger score restores FPR <= target
            nxt = int(np.searchsorted(s, s[j], side="right"))
            t = float(s[nxt]) if nxt < n else float(np.nextafter(s[-1], np.inf))
    return min(max(t, 1e-12), 1.0 - 1e-12)
