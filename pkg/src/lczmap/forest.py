"""Random-forest baseline on per-patch band statistics (Gini, bootstrap, mtry)."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels
from ._io import atomic_write_text
from .classes import N_CLASSES, LczClass
from .errors import ConfigError, ModelFormatError
from .raster import Patch

MASK64 = (1 << 64) - 1
# impurity decreases come from integer count sums, so genuine gains are
# >= 1/n^3; this only absorbs float rounding of an exact zero
_MIN_DECREASE = 1e-12


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def tree_seed(seed: int, tree_index: int) -> int:
    return (int(seed) & MASK64) ^ splitmix64(tree_index)


def patch_features(patch) -> np.ndarray:
    """Per-channel ``[mean, population std]`` pairs, channel order."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    return features_from_patches(data[None])[0]


def features_from_patches(patches: np.ndarray) -> np.ndarray:
    """Vectorised :func:`patch_features` over ``(n, c, s, s)``."""
    x = np.asarray(patches, dtype=np.float64).reshape(patches.shape[0], patches.shape[1], -1)
    out = np.empty((x.shape[0], 2 * x.shape[1]), dtype=np.float64)
    out[:, 0::2] = x.mean(axis=2)
    out[:, 1::2] = x.std(axis=2)
    return out.astype(np.float32)


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


class Split(NamedTuple):
    feature: int
    threshold: float
    decrease: float


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    candidate_features: Sequence[int],
    min_leaf: int = 1,
    n_classes: int = N_CLASSES,
) -> Optional[Split]:
    """Exhaustive Gini split search over midpoints of distinct sorted values.

    Ties prefer the lower feature index, then the lower threshold. Returns
    ``None`` when no admissible split reduces impurity.
    """
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < 2:
        return None
    counts = np.bincount(y, minlength=n_classes)
    sq_parent = int((counts * counts).sum())
    best: Optional[Split] = None
    for f in sorted(int(f) for f in candidate_features):
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = np.ascontiguousarray(col[order])
        pos, score = _kernels.split_scan(xs, y[order], n_classes, min_leaf)
        if pos < 0:
            continue
        decrease = (score - sq_parent / n) / n
        if decrease > _MIN_DECREASE and (best is None or decrease > best.decrease):
            threshold = (float(xs[pos]) + float(xs[pos + 1])) / 2.0
            best = Split(f, threshold, float(decrease))
    return best


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 20
    min_leaf: int = 1
    mtry: Optional[int] = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ConfigError(f"invalid forest parameters {self}")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")

    def resolved_mtry(self, n_features: int) -> int:
        m = self.mtry if self.mtry is not None else max(1, math.isqrt(n_features))
        return min(m, n_features)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForestParams":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown forest keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.feature = np.asarray(self.feature, np.int64)
        self.threshold = np.asarray(self.threshold, np.float64)
        self.left = np.asarray(self.left, np.int64)
        self.right = np.asarray(self.right, np.int64)
        self.counts = np.asarray(self.counts, np.int64).reshape(len(self.feature), N_CLASSES)
        self._freq = self.counts / self.counts.sum(axis=1, keepdims=True)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _kernels.apply_tree(self.feature, self.threshold, self.left, self.right, X)

    def leaf_frequencies(self, X: np.ndarray) -> np.ndarray:
        return self._freq[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }


def grow_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    mtry = params.resolved_mtry(n_features)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(c):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        return len(feature) - 1

    root_idx = np.arange(len(y))
    stack = [(new_node(np.bincount(y, minlength=N_CLASSES)), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= params.max_depth or np.count_nonzero(c) <= 1 or len(idx) < 2 * params.min_leaf:
            continue
        feats = np.sort(rng.choice(n_features, size=mtry, replace=False))
        Xn, yn = X[idx], y[idx]
        split = best_split(Xn, yn, feats, params.min_leaf)
        if split is None:
            continue
        go_left = Xn[:, split.feature] <= split.threshold
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = new_node(np.bincount(y[li], minlength=N_CLASSES))
        right[node] = new_node(np.bincount(y[ri], minlength=N_CLASSES))
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(feature, threshold, left, right, np.array(counts))


class RandomForest:
    """Bagged Gini trees; probabilities are mean per-tree leaf class frequencies."""

    def __init__(self, trees: list[Tree], n_features: int, params: ForestParams, seed: int):
        self.trees = trees
        self.n_features = n_features
        self.params = params
        self.seed = int(seed)
        if len(trees) != params.n_trees:
            raise ModelFormatError(f"forest has {len(trees)} trees, params say {params.n_trees}")
        for t in trees:
            internal = t.feature >= 0
            if internal.any() and t.feature[internal].max() >= n_features:
                raise ModelFormatError("tree references a feature beyond n_features")

    @property
    def mtry(self) -> int:
        return self.params.resolved_mtry(self.n_features)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float32))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((X.shape[0], N_CLASSES), dtype=np.float64)
        for t in self.trees:
            acc += t.leaf_frequencies(X)
        return acc / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1).astype(np.int64)

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        return self.predict(features_from_patches(patches))

    def to_dict(self) -> dict:
        return {
            "magic": "LCZRF",
            "version": 1,
            "n_features": self.n_features,
            "hyperparameters": asdict(self.params),
            "seed": self.seed,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RandomForest":
        if d.get("magic") != "LCZRF" or d.get("version") != 1:
            raise ModelFormatError("not an LCZRF v1 model")
        try:
            trees = [Tree(**t) for t in d["trees"]]
            return cls(trees, int(d["n_features"]), ForestParams(**d["hyperparameters"]), int(d["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed forest: {exc}") from exc

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "RandomForest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict_rf(forest: RandomForest, features) -> tuple[LczClass, np.ndarray]:
    """Class and 17-way probability vector for one feature vector."""
    p = forest.predict_proba(np.asarray(features, dtype=np.float32)[None])[0]
    return LczClass(int(np.argmax(p))), p


def train_rf_features(
    X: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams(), seed: int = 0, n_jobs: int = 1
) -> RandomForest:
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training set")
    n = len(y)

    def one(i):
        rng = np.random.default_rng(tree_seed(seed, i))
        if params.bootstrap:
            rows = rng.integers(0, n, size=n)
            return grow_tree(X[rows], y[rows], params, rng)
        return grow_tree(X, y, params, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(i) for i in range(params.n_trees)]
    return RandomForest(trees, X.shape[1], params, seed)


def train_rf(train, params: ForestParams = ForestParams(), seed: int = 0, n_jobs: int = 1) -> RandomForest:
    """Fit a forest on the patch statistics of a :class:`SampleSet`."""
    if len(train) == 0:
        raise ValueError("empty training set")
    return train_rf_features(features_from_patches(train.patches), train.labels, params, seed, n_jobs)
