import numpy as np
import pytest

from tefbench.errors import DivergenceDetected, InsufficientHoldout
from tefbench.models import (
    Detector,
    FfnnConfig,
    GbdtConfig,
    LinearConfig,
    calibrate_threshold,
    load_model,
    loss_and_grad,
    predict_label,
    predict_score,
    save_model,
    train_ffnn,
    train_gbdt,
    train_linear,
)
from tefbench.models.ffnn import init_params
from tefbench.models.gbdt import best_split


def brute_force_best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, min_child: int):
    """Exhaustive 1-D split oracle: every boundary between sorted values."""
    order = np.argsort(x)
    xs, gs, hs = x[order], g[order], h[order]
    n = len(xs)
    best = (-np.inf, None)
    G, H = gs.sum(), hs.sum()
    for pos in range(n - 1):
        if xs[pos] == xs[pos + 1]:
            continue
        if not (min_child <= pos + 1 <= n - min_child):
            continue
        GL, HL = gs[:pos + 1].sum(), hs[:pos + 1].sum()
        GR, HR = G - GL, H - HL
        gain = GL * GL / HL + GR * GR / HR - G * G / H
        if gain > best[0]:
            best = (gain, 0.5 * (xs[pos] + xs[pos + 1]))
    return best


class TestGbdt:
    def test_stump_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            x = rng.random(80)
            y = (x > rng.uniform(0.3, 0.7)).astype(float)
            if y.min() == y.max():
                continue
            model = train_gbdt(x[:, None], y,
                               GbdtConfig(num_boosting_rounds=1, num_leaves=2, max_depth=1))
            p = 1.0 / (1.0 + np.exp(-model.base_score))
            g = (p - y)
            h = np.maximum(p * (1 - p), 1e-6) * np.ones_like(y)
            gain, threshold = brute_force_best_split(x, g, h, 5)
            tree = model.trees[0]
            assert tree.feature[0] == 0
            assert tree.threshold[0] == pytest.approx(threshold, abs=1e-12)

    def test_single_class_constant_model(self):
        X = np.random.default_rng(0).random((50, 4))
        model = train_gbdt(X, np.ones(50))
        expected = 1.0 / (1.0 + np.exp(-np.log((1 - 1e-6) / 1e-6)))
        assert model.predict_proba(X) == pytest.approx(np.full(50, expected))
        assert not model.trees

    def test_loss_monotone_nonincreasing(self):
        rng = np.random.default_rng(1)
        X = rng.random((400, 16))
        y = ((X[:, 0] > 0.5) ^ (X[:, 5] > 0.4)).astype(float)
        model = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=30, num_leaves=15))
        diffs = np.diff(model.train_losses)
        assert np.all(diffs <= 1e-12)

    def test_holdout_accuracy_separable(self):
        rng = np.random.default_rng(2)
        X = rng.random((1200, 32))
        y = ((X[:, 3] + X[:, 7] > 1.0) | (X[:, 20] > 0.9)).astype(float)
        model = train_gbdt(X[:800], y[:800], GbdtConfig(num_boosting_rounds=40))
        acc = ((model.predict_proba(X[800:]) > 0.5) == y[800:]).mean()
        assert acc > 0.95

    def test_sample_weights_shift_prior(self):
        rng = np.random.default_rng(3)
        X = rng.random((200, 4))
        y = (rng.random(200) < 0.5).astype(float)
        w = np.where(y == 1, 10.0, 1.0)
        model = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=0), sample_weight=w)
        prior = float(np.dot(y, w) / w.sum())
        assert model.predict_proba(X)[0] == pytest.approx(prior, abs=1e-9)

    def test_depth_cap_respected(self):
        rng = np.random.default_rng(4)
        X = rng.random((500, 8))
        y = (np.sin(9 * X[:, 0]) > 0).astype(float)
        model = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=3, num_leaves=64, max_depth=3))
        for tree in model.trees:
            # depth from root via parent walk
            depth = {0: 0}
            maxd = 0
            for node in range(tree.n_nodes):
                if tree.feature[node] >= 0:
                    for child in (tree.left[node], tree.right[node]):
                        depth[child] = depth[node] + 1
                        maxd = max(maxd, depth[child])
            assert maxd <= 3

    def test_best_split_none_cases(self):
        g = np.zeros(8)
        h = np.ones(8)
        assert best_split(np.ones((8, 2)), g, h, 5) is None      # constant feature
        assert best_split(np.random.rand(6, 2), g[:6], h[:6], 5) is None  # too small


class TestFfnn:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for config in range(20):
            act = "tanh" if config % 2 else "relu"
            params = init_params(6, np.random.default_rng(100 + config))
            X = rng.random((4, 6))
            y = rng.integers(0, 2, 4).astype(float)
            w = rng.random(4) + 0.5
            _, grads = loss_and_grad(params, X, y, w, act)
            eps = 1e-6
            for key in params:
                flat = params[key].reshape(-1)
                for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    lp, _ = loss_and_grad(params, X, y, w, act)
                    flat[idx] = orig - eps
                    lm, _ = loss_and_grad(params, X, y, w, act)
                    flat[idx] = orig
                    fd = (lp - lm) / (2 * eps)
                    an = grads[key].reshape(-1)[idx]
                    rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-8)
                    worst = max(worst, rel)
        assert worst < 1e-3

    def test_zero_epochs_returns_init(self):
        X = np.random.default_rng(0).random((20, 5))
        y = np.zeros(20)
        cfg = FfnnConfig(epochs=0, seed=7)
        model = train_ffnn(X, y, cfg)
        fresh = init_params(5, np.random.default_rng(7))
        for k in fresh:
            assert np.array_equal(model.params[k], fresh[k])

    def test_xor_learnable(self):
        rng = np.random.default_rng(1)
        X = rng.integers(0, 2, size=(400, 2)).astype(float)
        y = (X[:, 0] != X[:, 1]).astype(float)
        X += rng.normal(0, 0.05, X.shape)
        model = train_ffnn(X, y, FfnnConfig(epochs=120, learning_rate=0.1, seed=0))
        acc = ((model.predict_proba(X) > 0.5) == y).mean()
        assert acc > 0.95
        assert model.train_losses[-1] < model.train_losses[0]

    def test_divergence_detected(self):
        X = np.random.default_rng(0).random((64, 4)) * 1000
        y = np.random.default_rng(1).integers(0, 2, 64).astype(float)
        with pytest.raises(DivergenceDetected):
            train_ffnn(X, y, FfnnConfig(epochs=50, learning_rate=1e6))


class TestLinear:
    def test_separable_accuracy(self):
        rng = np.random.default_rng(0)
        X = rng.random((600, 10))
        y = (X[:, 2] > 0.5).astype(float)
        model = train_linear(X, y, LinearConfig(epochs=300))
        assert ((model.predict_proba(X) > 0.5) == y).mean() > 0.97


class TestDetector:
    def make(self, threshold=0.5):
        rng = np.random.default_rng(0)
        X = rng.random((300, 8))
        y = (X[:, 0] > 0.5).astype(float)
        model = train_linear(X, y)
        return Detector(model, threshold)

    def test_label_matches_threshold_rule(self):
        det = self.make(0.5)
        rng = np.random.default_rng(1)
        X = rng.random((50, 8))
        scores = det.scores_unmetered(X)
        labels = det.labels_unmetered(X)
        assert np.array_equal(labels, (scores >= 0.5).astype(int))

    def test_ledger_counts_every_call(self):
        det = self.make()
        x = np.random.default_rng(2).random(8)
        assert det.queries == 0
        a = det.label(x)
        b = det.label(x)
        assert a == b
        assert det.queries == 2
        det.scores(np.random.default_rng(3).random((5, 8)))
        assert det.queries == 7
        det.labels_unmetered(np.random.default_rng(4).random((9, 8)))
        assert det.queries == 7
        assert predict_label(det, x) in (0, 1)
        predict_score(det, x)
        assert det.queries == 9

    def test_ledger_thread_safe(self):
        import threading
        det = self.make()
        x = np.zeros(8)

        def worker():
            for _ in range(200):
                det.label(x)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert det.queries == 1600


class TestCalibration:
    class FixedScores:
        def __init__(self, scores):
            self.scores = np.asarray(scores)

        def predict_proba(self, X):
            return self.scores[:np.atleast_2d(X).shape[0]]

    def test_order_statistic_example(self):
        scores = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
        scores = np.tile(scores, 10)  # 100 samples, same order statistics
        model = self.FixedScores(scores)
        t = calibrate_threshold(model, np.zeros((100, 1)), 0.2)
        assert t == pytest.approx(0.9)
        fpr = np.mean(scores >= t)
        assert fpr <= 0.2

    def test_fpr_covering_all_scores(self):
        scores = np.linspace(0.05, 0.95, 100)
        model = self.FixedScores(scores)
        t = calibrate_threshold(model, np.zeros((100, 1)), 1.0 - 1e-12)
        assert t <= scores.min()

    def test_insufficient_holdout(self):
        with pytest.raises(InsufficientHoldout):
            calibrate_threshold(self.FixedScores(np.zeros(10)), np.zeros((10, 1)), 0.1)

    def test_smallest_threshold_property(self):
        rng = np.random.default_rng(5)
        scores = rng.random(500)
        model = self.FixedScores(scores)
        for target in (0.01, 0.05, 0.2):
            t = calibrate_threshold(model, np.zeros((500, 1)), target)
            assert np.mean(scores >= t) <= target
            smaller = np.sort(scores)[np.searchsorted(np.sort(scores), t) - 1]
            assert np.mean(scores >= smaller) > target


class TestModelStore:
    @pytest.mark.parametrize("kind", ["gbdt", "linear", "ffnn"])
    def test_roundtrip_identical_predictions(self, tmp_path, kind):
        rng = np.random.default_rng(0)
        X = rng.random((300, 12))
        y = ((X[:, 0] + X[:, 4]) > 1.0).astype(float)
        if kind == "gbdt":
            model = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=8, num_leaves=7))
        elif kind == "linear":
            model = train_linear(X, y)
        else:
            model = train_ffnn(X, y, FfnnConfig(epochs=3))
        path = tmp_path / f"{kind}.tefm"
        save_model(path, model, threshold=0.42, extra_meta={"kind": kind})
        loaded, threshold, meta = load_model(path)
        assert threshold == 0.42
        assert meta["kind"] == kind
        assert np.array_equal(loaded.predict_proba(X), model.predict_proba(X))

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.random((100, 6))
        y = (X[:, 1] > 0.5).astype(float)
        m1 = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=4, seed=3))
        m2 = train_gbdt(X, y, GbdtConfig(num_boosting_rounds=4, seed=3))
        save_model(tmp_path / "a.tefm", m1, 0.5)
        save_model(tmp_path / "b.tefm", m2, 0.5)
        assert (tmp_path / "a.tefm").read_bytes() == (tmp_path / "b.tefm").read_bytes()
