"""Random forest binary classifier built from scratch.

Trees are grown on bootstrap samples with Gini-impurity splits evaluated on
floor(sqrt(n_features)) randomly drawn candidate features per node. Split
ties resolve to the lowest feature index, then the lowest threshold, so a
seed pins the whole forest. Scores are the mean over trees of the leaf
positive-class fraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

N_TREES = 200
MAX_DEPTH = 10
MIN_LEAF = 20


@dataclass
class Tree:
    """Flat array representation: negative child index marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)  # positive fraction at node

    def add_node(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            cur = node[idx]
            go_left = X[idx, feature[cur]] <= threshold[cur]
            node[idx] = np.where(go_left, left[cur], right[cur])
            active[idx] = feature[node[idx]] >= 0
        return value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        return cls(
            feature=[int(v) for v in data["feature"]],
            threshold=[float(v) for v in data["threshold"]],
            left=[int(v) for v in data["left"]],
            right=[int(v) for v in data["right"]],
            value=[float(v) for v in data["value"]],
        )


def _best_split(X, y, indices, features, min_leaf):
    """Best (impurity, feature, threshold) over candidate features.

    Scans features in ascending index order and thresholds in ascending
    value order with strict improvement, which implements the documented
    tie-break. Returns None when no split satisfies the leaf minimum.
    """
    n = indices.size
    best = None
    y_node = y[indices]
    for f in np.sort(features):
        xf = X[indices, f]
        order = np.argsort(xf, kind="stable")
        xs = xf[order]
        ys = y_node[order]
        # split after position i: left = sorted[: i + 1]
        cum_pos = np.cumsum(ys)
        i = np.arange(min_leaf - 1, n - min_leaf)
        if i.size == 0:
            continue
        distinct = xs[i] < xs[i + 1]
        if not distinct.any():
            continue
        i = i[distinct]
        n_left = (i + 1).astype(np.float64)
        n_right = n - n_left
        pos_left = cum_pos[i].astype(np.float64)
        pos_right = cum_pos[-1] - pos_left
        p_l = pos_left / n_left
        p_r = pos_right / n_right
        gini = (n_left * (2 * p_l * (1 - p_l)) + n_right * (2 * p_r * (1 - p_r))) / n
        j = int(np.argmin(gini))  # first minimum = lowest threshold
        if best is None or gini[j] < best[0]:
            threshold = (xs[i[j]] + xs[i[j] + 1]) / 2.0
            best = (float(gini[j]), int(f), float(threshold))
    return best


def _grow_tree(X, y, rng, max_depth, min_leaf, m_features):
    n, n_features = X.shape
    sample = rng.integers(0, n, size=n)
    tree = Tree()
    # stack of (node_id, sample indices, depth)
    root_value = float(y[sample].mean())
    root = tree.add_node(root_value)
    stack = [(root, sample, 0)]
    while stack:
        node_id, indices, depth = stack.pop()
        y_node = y[indices]
        n_node = indices.size
        pos = float(y_node.mean())
        if depth >= max_depth or n_node < 2 * min_leaf or pos in (0.0, 1.0):
            continue
        features = rng.choice(n_features, size=m_features, replace=False)
        split = _best_split(X, y, indices, features, min_leaf)
        if split is None:
            continue
        _, f, threshold = split
        go_left = X[indices, f] <= threshold
        left_idx = indices[go_left]
        right_idx = indices[~go_left]
        tree.feature[node_id] = f
        tree.threshold[node_id] = threshold
        left_id = tree.add_node(float(y[left_idx].mean()))
        right_id = tree.add_node(float(y[right_idx].mean()))
        tree.left[node_id] = left_id
        tree.right[node_id] = right_id
        stack.append((right_id, right_idx, depth + 1))
        stack.append((left_id, left_idx, depth + 1))
    return tree


@dataclass
class RandomForestModel:
    trees: list[Tree]
    n_features: int
    seed: int
    max_depth: int = MAX_DEPTH
    min_leaf: int = MIN_LEAF
    constant: float | None = None  # set for degenerate single-class fits

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        total = np.zeros(X.shape[0], dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "seed": self.seed,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "constant": self.constant,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RandomForestModel":
        return cls(
            trees=[Tree.from_dict(t) for t in data["trees"]],
            n_features=int(data["n_features"]),
            seed=int(data["seed"]),
            max_depth=int(data["max_depth"]),
            min_leaf=int(data["min_leaf"]),
            constant=None if data.get("constant") is None else float(data["constant"]),
        )


def train_rf(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int = N_TREES,
    max_depth: int = MAX_DEPTH,
    min_leaf: int = MIN_LEAF,
    seed: int = 0,
) -> RandomForestModel:
    """Fit the forest; ``y`` holds labels in {0, 1}.

    Per-tree RNG streams spawn deterministically from the master seed, so
    the forest is reproducible regardless of scheduling. A single-class
    input yields a constant-score model with a warning.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if np.unique(y).size < 2:
        logger.warning("train_rf: single-class input; returning a constant model")
        return RandomForestModel(
            trees=[],
            n_features=X.shape[1],
            seed=seed,
            max_depth=max_depth,
            min_leaf=min_leaf,
            constant=float(y[0]) if y.size else 0.0,
        )
    m_features = max(1, int(np.sqrt(X.shape[1])))
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = [
        _grow_tree(X, y, np.random.default_rng(s), max_depth, min_leaf, m_features)
        for s in seeds
    ]
    return RandomForestModel(
        trees=trees,
        n_features=X.shape[1],
        seed=seed,
        max_depth=max_depth,
        min_leaf=min_leaf,
    )
