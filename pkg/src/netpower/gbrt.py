"""Squared-error gradient-boosted regression trees with exact greedy splits."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit

FORMAT_VERSION = 1


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.  Rows go left when ``x <= threshold``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def rec(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(int(self.left[i])), rec(int(self.right[i])))
        return rec(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            fi = np.where(inner, f, 0)
            go_left = X[rows, fi] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], np.int64), np.asarray(d["threshold"], np.float64),
                   np.asarray(d["left"], np.int64), np.asarray(d["right"], np.int64),
                   np.asarray(d["value"], np.float64))


@dataclass
class GbrtConfig:
    n_estimators: int = 500
    max_depth: int = 5
    shrinkage: float = 0.1
    min_samples_leaf: int = 1


@dataclass
class GbrtModel:
    n_features: int
    base: float
    shrinkage: float = 0.1
    max_depth: int = 5
    n_estimators: int = 500
    trees: List[Tree] = field(default_factory=list)
    train_mse: List[float] = field(default_factory=list)   # after 0, 1, ..., len(trees) rounds
    _packed: Optional[tuple] = field(default=None, repr=False, compare=False)

    # -- prediction ---------------------------------------------------------------
    def raw_predict(self, X: np.ndarray, n_trees: Optional[int] = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"row width {X.shape[1]} does not match the model's {self.n_features} features")
        trees = self.trees if n_trees is None else self.trees[:n_trees]
        if not trees:
            return np.full(X.shape[0], self.base)
        return self.base + self.shrinkage * _packed_sum(self._pack(), X, len(trees))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(self.raw_predict(X), 0.0)

    def _pack(self) -> tuple:
        if self._packed is None:
            depth = max(1, max(t.depth for t in self.trees))
            parts = [_complete(t, depth) for t in self.trees]
            self._packed = (np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]),
                            np.stack([p[2] for p in parts]), depth)
        return self._packed

    # -- serialisation -------------------------------------------------------------
    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, "n_features": self.n_features, "base": self.base,
                           "shrinkage": self.shrinkage, "max_depth": self.max_depth,
                           "n_estimators": self.n_estimators, "train_mse": self.train_mse,
                           "trees": [t.to_dict() for t in self.trees]})

    @classmethod
    def from_json(cls, text: str) -> "GbrtModel":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')}")
        return cls(d["n_features"], d["base"], d["shrinkage"], d["max_depth"], d["n_estimators"],
                   [Tree.from_dict(t) for t in d["trees"]], list(d.get("train_mse", [])))

    def same_as(self, other: "GbrtModel") -> bool:
        return self.to_json() == other.to_json()


@njit(cache=True)
def _predict_complete(Xt, feat, thr, val, depth):
    """Sum over trees stored as complete binary trees; rows walk level by level without branches."""
    R = Xt.shape[1]
    T = feat.shape[0]
    base = (1 << depth) - 1
    out = np.zeros(R)
    node = np.zeros(R, np.int64)
    for t in range(T):
        node[:] = 0
        for _ in range(depth):
            for i in range(R):
                k = node[i]
                node[i] = 2 * k + 1 + (Xt[feat[t, k], i] > thr[t, k])
        for i in range(R):
            out[i] += val[t, node[i] - base]
    return out


def _complete(tree: Tree, depth: int):
    """Re-encode a tree of depth <= ``depth`` as a complete tree; early leaves always route left."""
    n_inner = (1 << depth) - 1
    feat = np.zeros(n_inner, np.int64)
    thr = np.full(n_inner, np.inf)
    val = np.zeros(1 << depth)
    stack = [(0, 0, 0)]
    while stack:
        o, p, k = stack.pop()
        if tree.feature[o] < 0:
            lo = hi = p
            for _ in range(depth - k):
                lo, hi = 2 * lo + 1, 2 * hi + 2
            val[lo - n_inner:hi - n_inner + 1] = tree.value[o]
            continue
        feat[p] = tree.feature[o]
        thr[p] = tree.threshold[o]
        stack.append((int(tree.left[o]), 2 * p + 1, k + 1))
        stack.append((int(tree.right[o]), 2 * p + 2, k + 1))
    return feat, thr, val


def _packed_sum(packed: tuple, X: np.ndarray, n_trees: Optional[int] = None) -> np.ndarray:
    feat, thr, val, depth = packed
    k = feat.shape[0] if n_trees is None else n_trees
    return _predict_complete(np.ascontiguousarray(X.T), feat[:k], thr[:k], val[:k], depth)


# -- fitting -----------------------------------------------------------------------

@njit(cache=True)
def _level_splits(Xs, order, r, node_of, n_nodes, min_leaf):
    """Exact greedy split search for every open node of one tree level.

    Features are scanned in index order and positions in ascending value
    order; a candidate replaces the incumbent only on a strictly larger gain.
    """
    F, m = order.shape
    S = np.zeros(n_nodes)
    N = np.zeros(n_nodes)
    rmin = np.full(n_nodes, np.inf)
    rmax = np.full(n_nodes, -np.inf)
    for i in range(m):
        k = node_of[i]
        if k >= 0:
            S[k] += r[i]
            N[k] += 1.0
            rmin[k] = min(rmin[k], r[i])
            rmax[k] = max(rmax[k], r[i])
    best = np.full(n_nodes, -np.inf)
    best_f = np.full(n_nodes, -1, np.int64)
    best_thr = np.zeros(n_nodes)
    cl = np.zeros(n_nodes)
    nl = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    for f in range(F):
        cl[:] = 0.0
        nl[:] = 0.0
        for j in range(m):
            i = order[f, j]
            k = node_of[i]
            if k < 0:
                continue
            x = Xs[f, j]
            if nl[k] >= min_leaf and N[k] - nl[k] >= min_leaf and x > last[k] and rmax[k] > rmin[k]:
                a = cl[k]
                g = a * a / nl[k] + (S[k] - a) ** 2 / (N[k] - nl[k]) - S[k] * S[k] / N[k]
                if g > best[k]:
                    best[k] = g
                    best_f[k] = f
                    t = 0.5 * (last[k] + x)
                    if not (last[k] <= t < x):
                        t = last[k]
                    best_thr[k] = t
            cl[k] += r[i]
            nl[k] += 1.0
            last[k] = x
    return best_f, best_thr, S, N


@njit(cache=True)
def _route(X, node_of, split_f, split_thr, child_l, child_r):
    for i in range(X.shape[0]):
        k = node_of[i]
        if k < 0:
            continue
        f = split_f[k]
        if f < 0:
            node_of[i] = -1
        elif X[i, f] <= split_thr[k]:
            node_of[i] = child_l[k]
        else:
            node_of[i] = child_r[k]


def _grow_tree(X: np.ndarray, Xs: np.ndarray, order: np.ndarray, r: np.ndarray, max_depth: int,
               min_leaf: int):
    """One regression tree on residuals ``r``, grown level by level."""
    m = r.shape[0]
    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [0.0]
    row_value = np.zeros(m)
    level = [0]                      # tree node ids of the open nodes; slot = position
    node_of = np.zeros(m, np.int64)
    depth = 0
    while level:
        n_open = len(level)
        if depth < max_depth:
            bf, bt, S, N = _level_splits(Xs, order, r, node_of, n_open, min_leaf)
        else:
            bf = np.full(n_open, -1, np.int64)
            bt = np.zeros(n_open)
            S = np.bincount(node_of[node_of >= 0], weights=r[node_of >= 0], minlength=n_open)
            N = np.bincount(node_of[node_of >= 0], minlength=n_open).astype(np.float64)
        child_l = np.full(n_open, -1, np.int64)
        child_r = np.full(n_open, -1, np.int64)
        nxt = []
        leaf_val = np.zeros(n_open)
        for slot, nid in enumerate(level):
            if bf[slot] < 0:
                v = float(S[slot] / N[slot]) if N[slot] > 0 else 0.0
                value[nid] = v
                leaf_val[slot] = v
                continue
            feature[nid] = int(bf[slot])
            threshold[nid] = float(bt[slot])
            for side, arr in ((left, child_l), (right, child_r)):
                cid = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
                side[nid] = cid
                arr[slot] = len(nxt)
                nxt.append(cid)
        live = node_of >= 0
        leafy = live.copy()
        leafy[live] = bf[node_of[live]] < 0
        row_value[leafy] = leaf_val[node_of[leafy]]
        _route(X, node_of, bf, bt, child_l, child_r)
        level = nxt
        depth += 1
    tree = Tree(np.asarray(feature, np.int64), np.asarray(threshold), np.asarray(left, np.int64),
                np.asarray(right, np.int64), np.asarray(value))
    return tree, row_value


def gbrt_fit(X: np.ndarray, y: np.ndarray, config: Optional[GbrtConfig] = None) -> GbrtModel:
    """Boost ``config.n_estimators`` depth-limited trees on squared error.

    Rows are first put in a canonical (lexicographic) order so the fit does
    not depend on the order in which rows are supplied.
    """
    config = config or GbrtConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (rows, features) and y (rows,)")
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in training data")
    perm = np.lexsort((y,) + tuple(X[:, j] for j in range(X.shape[1] - 1, -1, -1)))
    X, y = np.ascontiguousarray(X[perm]), y[perm]
    m, F = X.shape
    base = float(y.sum() / m)
    model = GbrtModel(F, base, config.shrinkage, config.max_depth, config.n_estimators)
    pred = np.full(m, base)
    model.train_mse.append(float(np.mean((y - pred) ** 2)))
    if (y == y[0]).all():
        return model
    if (X == X[0]).all():
        warnings.warn("feature matrix has zero variance; model reduces to the base score", RuntimeWarning)
        return model
    Xt = np.ascontiguousarray(X.T)
    order = np.ascontiguousarray(np.argsort(Xt, axis=1, kind="stable"))
    Xs = np.ascontiguousarray(np.take_along_axis(Xt, order, axis=1))
    for _ in range(config.n_estimators):
        r = y - pred
        tree, rv = _grow_tree(X, Xs, order, r, config.max_depth, max(1, config.min_samples_leaf))
        model.trees.append(tree)
        pred = pred + config.shrinkage * rv
        model.train_mse.append(float(np.mean((y - pred) ** 2)))
    return model


__all__ = ["Tree", "GbrtConfig", "GbrtModel", "gbrt_fit"]
