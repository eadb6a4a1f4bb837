"""Gradient-boosted regression trees on logistic loss, trained from scratch.

Exact greedy split search (no histogram binning) with leaf-wise best-first
growth; scores are sigmoid(base_score + shrinkage * sum of tree outputs).
Nodes store training cover (sum of sample weights) for path-dependent
Shapley attribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_H = 1e-12
_MAX_LEAF_VALUE = 4.0
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    num_boosting_rounds: int = 100
    learning_rate: float = 0.1
    num_leaves: int = 31
    max_depth: int = 12
    min_child_samples: int = 5
    feature_fraction: float = 1.0
    seed: int = 0

    @property
    def effective_min_child(self) -> int:
        # values below 5 are clamped
        return max(5, int(self.min_child_samples))


@dataclass
class Tree:
    """Array-of-nodes regression tree; leaves have feature == -1."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[idx] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            node = idx[rows]
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
            active = self.feature[idx] >= 0
        return self.value[idx]

    def leaf_mean(self) -> float:
        """Cover-weighted mean leaf value (background expectation)."""
        leaves = self.feature < 0
        w = self.cover[leaves]
        return float(np.dot(self.value[leaves], w) / w.sum())

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class GbdtModel:
    base_score: float
    shrinkage: float
    trees: list[Tree] = field(default_factory=list)
    n_features: int = 0
    train_losses: list[float] = field(default_factory=list)

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.shrinkage * t.predict(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_margin(X))

    def expected_margin(self) -> float:
        """Mean margin over the training background stored in node covers."""
        return self.base_score + self.shrinkage * sum(t.leaf_mean() for t in self.trees)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return float(np.log(p / (1 - p)))


def _log_loss(y: np.ndarray, p: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    ll = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return float(np.dot(ll, w) / w.sum())


def best_split(Xn: np.ndarray, g: np.ndarray, h: np.ndarray, min_child: int):
    """Exact greedy split over all (feature, threshold) candidates.

    Returns (gain, feature_pos, threshold) or None. ``g``/``h`` are already
    weighted gradient/hessian sums per row.
    """
    n = Xn.shape[0]
    if n < 2 * min_child:
        return None
    order = np.argsort(Xn, axis=0)
    res = _scan_split(np.take_along_axis(Xn, order, axis=0), g[order], h[order], min_child)
    if res is None:
        return None
    gain, feat, pos, threshold = res
    return gain, feat, threshold


def _scan_split(xs: np.ndarray, gs: np.ndarray, hs: np.ndarray, min_child: int):
    """Gain scan over per-column pre-sorted values/gradients.

    Candidate positions p (left block = sorted rows 0..p) are restricted to
    the window where both children satisfy min_child.
    """
    n = xs.shape[0]
    GL_full = np.cumsum(gs, axis=0)
    HL_full = np.cumsum(hs, axis=0)
    G = float(GL_full[-1, 0])
    H = float(HL_full[-1, 0])
    sl = slice(min_child - 1, n - min_child)
    GL = GL_full[sl]
    HL = HL_full[sl]
    GR = G - GL
    HR = H - HL
    np.maximum(HL, _EPS_H, out=HL)
    np.maximum(HR, _EPS_H, out=HR)
    np.multiply(GL, GL, out=GL)
    GL /= HL
    np.multiply(GR, GR, out=GR)
    GR /= HR
    gain = GL
    gain += GR
    valid = xs[min_child - 1:n - min_child] < xs[min_child:n - min_child + 1]
    gain[~valid] = -np.inf
    flat = int(np.argmax(gain))
    rel, feat = np.unravel_index(flat, gain.shape)
    parent = G * G / max(H, _EPS_H)
    best_gain = gain[rel, feat] - parent
    if not np.isfinite(best_gain) or best_gain <= _MIN_GAIN:
        return None
    pos = int(rel) + min_child - 1
    lo, hi = xs[pos, feat], xs[pos + 1, feat]
    threshold = 0.5 * (lo + hi)
    if threshold >= hi:  # adjacent floats: keep the partition consistent with <=
        threshold = lo
    return float(best_gain), int(feat), pos, float(threshold)


class _Node:
    __slots__ = ("order", "depth", "grad", "hess", "cov", "split")

    def __init__(self, order, depth, grad, hess, cov, split):
        self.order = order  # (n_node, F) row indices, column-sorted per feature
        self.depth = depth
        self.grad = grad
        self.hess = hess
        self.cov = cov
        self.split = split  # (gain, feature_pos, split_pos, threshold) or None


def _leaf_value(grad: float, hess: float) -> float:
    v = -grad / max(hess, _EPS_H)
    return float(np.clip(v, -_MAX_LEAF_VALUE, _MAX_LEAF_VALUE))


def _grow_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, w: np.ndarray,
               cols: np.ndarray, cfg: GbdtConfig) -> Tree:
    """Pre-sorted exact growth: argsort once per tree, partition orders per split."""
    min_child = cfg.effective_min_child
    Xc = np.ascontiguousarray(X[:, cols])
    n, n_f = Xc.shape
    col_idx = np.arange(n_f)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    cover: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        cover.append(0.0)
        return len(feature) - 1

    def evaluate(order: np.ndarray, depth: int) -> _Node:
        rows = order[:, 0]
        split = None
        if depth < cfg.max_depth and order.shape[0] >= 2 * min_child:
            split = _scan_split(Xc[order, col_idx], g[order], h[order], min_child)
        return _Node(order, depth, float(g[rows].sum()), float(h[rows].sum()),
                     float(w[rows].sum()), split)

    root = evaluate(np.argsort(Xc, axis=0), 0)
    root_id = new_node()
    cover[root_id] = root.cov
    frontier: list[tuple[_Node, int]] = [(root, root_id)]
    n_leaves = 1
    is_left = np.zeros(n, dtype=bool)
    while n_leaves < cfg.num_leaves:
        # best-first: split the frontier leaf with the highest gain
        best_i = -1
        best_gain = _MIN_GAIN
        for i, (nd, _) in enumerate(frontier):
            if nd.split is not None and nd.split[0] > best_gain:
                best_gain = nd.split[0]
                best_i = i
        if best_i < 0:
            break
        nd, node_id = frontier.pop(best_i)
        _, feat_pos, pos, thr = nd.split
        order = nd.order
        n_node = order.shape[0]
        left_rows = order[:pos + 1, feat_pos]
        is_left[order[:, 0]] = False
        is_left[left_rows] = True
        sel = is_left[order]
        lorder = order.T[sel.T].reshape(n_f, pos + 1).T
        rorder = order.T[~sel.T].reshape(n_f, n_node - pos - 1).T
        lnode = evaluate(lorder, nd.depth + 1)
        rnode = evaluate(rorder, nd.depth + 1)
        lid, rid = new_node(), new_node()
        cover[lid] = lnode.cov
        cover[rid] = rnode.cov
        feature[node_id] = int(cols[feat_pos])
        threshold[node_id] = thr
        left[node_id] = lid
        right[node_id] = rid
        frontier.append((lnode, lid))
        frontier.append((rnode, rid))
        n_leaves += 1
    for nd, node_id in frontier:
        value[node_id] = _leaf_value(nd.grad, nd.hess)
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value), np.array(cover))


def train_gbdt(X: np.ndarray, y: np.ndarray, cfg: GbdtConfig | None = None,
               sample_weight: np.ndarray | None = None) -> GbdtModel:
    """Boosted logistic regression trees; training loss is non-increasing per round.

    Single-class targets yield a constant model at the (clipped) class prior.
    """
    cfg = cfg or GbdtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError(f"bad training shapes X={X.shape} y={y.shape}")
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)

    prior = float(np.dot(y, w) / w.sum())
    model = GbdtModel(base_score=_logit(prior), shrinkage=cfg.learning_rate,
                      n_features=X.shape[1])
    if prior in (0.0, 1.0):
        # DegenerateLabels: constant model at the class prior
        model.train_losses.append(_log_loss(y, _sigmoid(np.full(len(y), model.base_score)), w))
        return model

    rng = np.random.default_rng(cfg.seed)
    n_cols = X.shape[1]
    k_cols = max(1, int(np.ceil(cfg.feature_fraction * n_cols)))
    margin = np.full(X.shape[0], model.base_score)
    model.train_losses.append(_log_loss(y, _sigmoid(margin), w))
    for _ in range(cfg.num_boosting_rounds):
        p = _sigmoid(margin)
        grad = (p - y) * w
        hess = np.maximum(p * (1 - p), 1e-6) * w
        cols = np.sort(rng.choice(n_cols, size=k_cols, replace=False)) \
            if k_cols < n_cols else np.arange(n_cols)
        tree = _grow_tree(X, grad, hess, w, cols, cfg)
        margin += cfg.learning_rate * tree.predict(X)
        model.trees.append(tree)
        model.train_losses.append(_log_loss(y, _sigmoid(margin), w))
    return model
