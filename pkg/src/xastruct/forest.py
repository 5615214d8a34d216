"""From-scratch random forest classifier.

Gini-impurity CART trees on bootstrap samples with a random feature
subset per split. Growth is deliberately eager: a node splits even at
zero impurity gain as long as a valid split exists, so a forest with
unlimited depth memorizes any consistently-labeled training set (XOR
included). Determinism is part of the contract: a fixed seed yields an
identical forest, and split ties resolve to the lowest feature index,
then the lowest threshold.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 16  # None for unbounded
    min_samples_leaf: int = 2
    max_features: object = "sqrt"  # "sqrt", an int, or None for all
    bootstrap: bool = True
    seed: int = 0


class DecisionTree:
    """Flat node-array tree. Internal nodes route on x[feature] <= threshold;
    leaves carry the class histogram of the training rows that reached them."""

    def __init__(self, nodes: list, n_classes: int):
        self.nodes = nodes
        self.n_classes = n_classes

    def leaf_histogram(self, x: np.ndarray) -> np.ndarray:
        node = self.nodes[0]
        while "feature" in node:
            if x[node["feature"]] <= node["threshold"]:
                node = self.nodes[node["left"]]
            else:
                node = self.nodes[node["right"]]
        return np.asarray(node["histogram"], dtype=float)


class RandomForest:
    def __init__(self, trees: list, config: ForestConfig, n_features: int, n_classes: int):
        self.trees = trees
        self.config = config
        self.n_features = n_features
        self.n_classes = n_classes


def _gini(hist: np.ndarray) -> float:
    m = hist.sum()
    if m == 0:
        return 0.0
    frac = hist / m
    return 1.0 - float(np.dot(frac, frac))


def _best_split(X, y, rows, n_classes, features, min_samples_leaf):
    """Best (feature, threshold, gain) over `features`, or None if no valid split."""
    labels = y[rows]
    node_hist = np.bincount(labels, minlength=n_classes).astype(float)
    m = rows.size
    node_gini = _gini(node_hist)
    best = None  # (gain, feature, threshold)
    for f in features:
        vals = X[rows, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sl = labels[order]
        # prefix class counts: counts[p] = histogram of the first p rows
        onehot = np.zeros((m, n_classes))
        onehot[np.arange(m), sl] = 1.0
        prefix = np.cumsum(onehot, axis=0)
        boundaries = np.nonzero(sv[:-1] < sv[1:])[0] + 1  # split sizes
        for p in boundaries:
            if p < min_samples_leaf or m - p < min_samples_leaf:
                continue
            left = prefix[p - 1]
            right = node_hist - left
            weighted = (p * _gini(left) + (m - p) * _gini(right)) / m
            gain = node_gini - weighted
            if best is None or gain > best[0]:
                best = (gain, f, 0.5 * (sv[p - 1] + sv[p]))
    return best


def _grow_tree(X, y, rows, n_classes, config, rng) -> list:
    n_total_features = X.shape[1]
    if config.max_features is None:
        m_feat = n_total_features
    elif config.max_features == "sqrt":
        m_feat = max(1, int(np.sqrt(n_total_features)))
    else:
        m_feat = min(int(config.max_features), n_total_features)

    nodes = []

    def build(rows, depth):
        index = len(nodes)
        nodes.append(None)  # reserve slot
        hist = np.bincount(y[rows], minlength=n_classes)
        pure = np.count_nonzero(hist) <= 1
        at_depth = config.max_depth is not None and depth >= config.max_depth
        split = None
        if not pure and not at_depth and rows.size >= 2 * config.min_samples_leaf:
            subset = np.sort(rng.choice(n_total_features, size=m_feat, replace=False))
            split = _best_split(X, y, rows, n_classes, subset, config.min_samples_leaf)
            if split is None and m_feat < n_total_features:
                # the drawn subset was constant on this node; retry with all features
                split = _best_split(
                    X, y, rows, n_classes, np.arange(n_total_features), config.min_samples_leaf
                )
        if split is None:
            nodes[index] = {"histogram": [int(c) for c in hist]}
            return index
        _, feature, threshold = split
        go_left = X[rows, feature] <= threshold
        left = build(rows[go_left], depth + 1)
        right = build(rows[~go_left], depth + 1)
        nodes[index] = {
            "feature": int(feature),
            "threshold": float(threshold),
            "left": left,
            "right": right,
        }
        return index

    build(rows, 0)
    return nodes


def fit(X, y, config: ForestConfig = ForestConfig()) -> RandomForest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"need X [n, d] and y [n], got {X.shape} and {y.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 training rows")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    n_classes = int(y.max()) + 1
    if config.n_trees < 1:
        raise ValueError("n_trees must be at least 1")

    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t])
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(DecisionTree(_grow_tree(X, y, rows, n_classes, config, rng), n_classes))
    return RandomForest(trees, config, X.shape[1], n_classes)


def predict_proba(forest: RandomForest, x) -> np.ndarray:
    """Average of the per-tree leaf distributions; sums to 1."""
    x = np.asarray(x, dtype=float)
    if x.shape != (forest.n_features,):
        raise ValueError(f"expected {forest.n_features} features, got shape {x.shape}")
    proba = np.zeros(forest.n_classes)
    for tree in forest.trees:
        hist = tree.leaf_histogram(x)
        proba += hist / hist.sum()
    return proba / len(forest.trees)


def predict(forest: RandomForest, x) -> int:
    # argmax breaks ties toward the lowest class index
    return int(np.argmax(predict_proba(forest, x)))


def predict_many(forest: RandomForest, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.array([predict(forest, row) for row in X], dtype=int)


def forest_to_doc(forest: RandomForest) -> dict:
    return {
        "header": {
            "n_trees": forest.config.n_trees,
            "max_depth": forest.config.max_depth,
            "min_samples_leaf": forest.config.min_samples_leaf,
            "max_features": forest.config.max_features,
            "bootstrap": forest.config.bootstrap,
            "seed": forest.config.seed,
            "n_features": forest.n_features,
            "n_classes": forest.n_classes,
        },
        "trees": [tree.nodes for tree in forest.trees],
    }


def forest_from_doc(doc: dict) -> RandomForest:
    h = doc["header"]
    config = ForestConfig(
        n_trees=h["n_trees"],
        max_depth=h["max_depth"],
        min_samples_leaf=h["min_samples_leaf"],
        max_features=h["max_features"],
        bootstrap=h["bootstrap"],
        seed=h["seed"],
    )
    trees = [DecisionTree(nodes, h["n_classes"]) for nodes in doc["trees"]]
    return RandomForest(trees, config, h["n_features"], h["n_classes"])


def save_forest(forest: RandomForest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(forest_to_doc(forest), fh, sort_keys=True)
        fh.write("\n")


def load_forest(path) -> RandomForest:
    with open(path) as fh:
        doc = json.load(fh)
    return forest_from_doc(doc)
