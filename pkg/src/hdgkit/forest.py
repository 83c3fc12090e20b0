"""Random decision forest: training, prediction, predictor importance, and the
two-stage prune-then-classify pipeline.

Trees are grown to purity (or down to single rows) on bootstrap samples, with
sqrt(num_features) random candidate features per split and Gini impurity as
the split criterion. All randomness is drawn from per-tree streams derived
from (seed, tree_index), so results never depend on scheduling or on how many
forests were trained before.

The tree growing loop is numba-compiled: the feature vectors this package
produces have >10k dimensions and the evaluation protocols train hundreds of
forests, which pure numpy cannot sustain.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from numba import njit

from .core import HyperParams


class EmptySelectionError(ValueError):
    """Pruning kept no features (threshold factor too large, or importance all zero)."""


@njit(cache=True)
def _grow_tree(X, y, n_classes, idx, pool, m, perm, importance):
    """Grow one tree on the rows listed in idx (a bootstrap of X's rows).

    idx is partitioned in place; perm is a persistent permutation buffer over
    all feature indices; pool is a stream of uniform [0,1) draws used for the
    per-node feature subsampling. Gini impurity decreases are accumulated
    into importance (scaled by 1/n_root). Returns flat node arrays.
    """
    n = idx.size
    p = X.shape[1]
    max_nodes = 2 * n - 1 if n > 1 else 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    counts = np.zeros((max_nodes, n_classes), np.int64)

    stack_node = np.empty(max_nodes, np.int32)
    stack_lo = np.empty(max_nodes, np.int64)
    stack_hi = np.empty(max_nodes, np.int64)
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    sp = 1
    n_nodes = 1
    cursor = 0

    vals = np.empty(n, np.float64)
    tmp = np.empty(n, np.int64)
    cls_left = np.empty(n_classes, np.int64)

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        nn = hi - lo

        for k in range(n_classes):
            counts[node, k] = 0
        for i in range(lo, hi):
            counts[node, y[idx[i]]] += 1

        present = 0
        for k in range(n_classes):
            if counts[node, k] > 0:
                present += 1
        if nn < 2 or present <= 1:
            continue  # leaf: feature stays -1

        s2 = 0.0
        for k in range(n_classes):
            s2 += float(counts[node, k]) * counts[node, k]
        node_score = nn - s2 / nn  # nn * gini(node)

        # Shuffle the first m slots of perm (partial Fisher-Yates); if none of
        # those m candidates admits a valid split, keep scanning the rest of
        # perm so a splittable node is never forced into an impure leaf.
        for i in range(m):
            r = pool[cursor]
            cursor += 1
            j = i + int(r * (p - i))
            if j >= p:
                j = p - 1
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t

        best_score = np.inf
        best_feat = -1
        best_thr = 0.0
        best_nl = 0
        for fi in range(p):
            if fi >= m and best_feat >= 0:
                break
            f = perm[fi]
            vmin = np.inf
            vmax = -np.inf
            for i in range(nn):
                v = X[idx[lo + i], f]
                vals[i] = v
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
            if vmin >= vmax:
                continue  # constant within node
            order = np.argsort(vals[:nn])
            for k in range(n_classes):
                cls_left[k] = 0
            suml2 = 0.0
            for i in range(nn - 1):
                c = y[idx[lo + order[i]]]
                suml2 += 2.0 * cls_left[c] + 1.0
                cls_left[c] += 1
                vi = vals[order[i]]
                if vi >= vals[order[i + 1]]:
                    continue
                nl = i + 1
                nr = nn - nl
                sr2 = 0.0
                for k in range(n_classes):
                    d = float(counts[node, k] - cls_left[k])
                    sr2 += d * d
                score = nl - suml2 / nl + nr - sr2 / nr
                if score < best_score:
                    best_score = score
                    best_feat = f
                    best_thr = vi  # rows with value <= vi go left
                    best_nl = nl

        if best_feat < 0:
            continue  # every feature constant within the node

        feature[node] = best_feat
        threshold[node] = best_thr
        importance[best_feat] += (node_score - best_score) / n

        a = 0
        b = best_nl
        for i in range(lo, hi):
            if X[idx[i], best_feat] <= best_thr:
                tmp[a] = idx[i]
                a += 1
            else:
                tmp[b] = idx[i]
                b += 1
        for i in range(nn):
            idx[lo + i] = tmp[i]

        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        stack_node[sp] = rchild
        stack_lo[sp] = lo + best_nl
        stack_hi[sp] = hi
        sp += 1
        stack_node[sp] = lchild
        stack_lo[sp] = lo
        stack_hi[sp] = lo + best_nl
        sp += 1

    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        counts[:n_nodes],
    )


@dataclass
class DecisionTree:
    """Flat node arrays; feature == -1 marks a leaf. Rows with
    value <= threshold go left. counts[k] holds the class histogram of the
    training rows routed through each node (bootstrap counts at leaves)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of X."""
        node = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            at_internal = self.feature[node] >= 0
            if not at_internal.any():
                return node
            cur = node[at_internal]
            rows = np.flatnonzero(at_internal)
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])

    def leaf_counts(self, X: np.ndarray) -> np.ndarray:
        return self.counts[self.apply(X)]


@dataclass
class Forest:
    trees: list
    num_classes: int
    num_features: int
    raw_importance: np.ndarray  # summed Gini decrease per feature / num trees

    def vote_counts(self, X: np.ndarray) -> np.ndarray:
        """Summed leaf class histograms across trees, shape n x num_classes."""
        X = np.asarray(X, dtype=np.float64)
        total = np.zeros((X.shape[0], self.num_classes), dtype=np.int64)
        for tree in self.trees:
            total += tree.leaf_counts(X)
        return total


@dataclass
class ImportanceVector:
    """Per-predictor importance; normalized = raw / ||raw||_2 (zeros if the
    norm is zero)."""

    raw: np.ndarray
    normalized: Optional[np.ndarray] = None

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if (self.raw < 0).any():
            raise ValueError("raw importance values must be >= 0")
        if self.normalized is None:
            norm = float(np.linalg.norm(self.raw))
            self.normalized = self.raw / norm if norm > 0 else np.zeros_like(self.raw)
        else:
            self.normalized = np.asarray(self.normalized, dtype=np.float64)
            if self.normalized.shape != self.raw.shape:
                raise ValueError("raw and normalized importance lengths differ")

    @property
    def num_predictors(self) -> int:
        return self.raw.size


@dataclass
class FeatureMask:
    """Indices kept by importance pruning, with the threshold that chose them."""

    kept_indices: np.ndarray
    theta: float
    alpha: float

    def __post_init__(self):
        kept = np.asarray(self.kept_indices, dtype=np.int64)
        if kept.size == 0:
            raise ValueError("a feature mask cannot be empty")
        if not (np.diff(kept) > 0).all():
            raise ValueError("kept_indices must be strictly increasing")
        self.kept_indices = kept

    @property
    def num_kept(self) -> int:
        return self.kept_indices.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 1:
            return X[self.kept_indices]
        return X[:, self.kept_indices]


def _check_training_data(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("X must be a samples x features matrix")
    if y.ndim != 1 or y.size != X.shape[0]:
        raise ValueError(f"y must have one label per row of X ({X.shape[0]}), got {y.size}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if y.min() < 0:
        raise ValueError("labels must be >= 0")
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    return X, y.astype(np.int64)


def train_forest(X, y, trees: int, rng_seed: int, num_classes: Optional[int] = None) -> Forest:
    """Train a bagged forest of `trees` Gini trees, deterministic in rng_seed."""
    if trees < 1:
        raise ValueError("trees must be >= 1")
    if rng_seed < 0:
        raise ValueError("rng_seed must be >= 0")
    X, y = _check_training_data(X, y)
    n, p = X.shape
    if num_classes is None:
        num_classes = int(y.max()) + 1
    elif y.max() >= num_classes:
        raise ValueError(f"label {int(y.max())} out of range for num_classes={num_classes}")
    m = max(1, math.isqrt(p))
    importance = np.zeros(p)
    built = []
    for t in range(trees):
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, t]))
        idx = rng.integers(0, n, size=n)  # bootstrap, with replacement
        pool = rng.random(2 * n * m + 16)
        perm = np.arange(p, dtype=np.int64)
        parts = _grow_tree(X, y, num_classes, idx, pool, m, perm, importance)
        built.append(DecisionTree(*(np.array(a) for a in parts)))
    return Forest(built, num_classes, p, importance / trees)


def predict(forest: Forest, x: np.ndarray):
    """Predicted label and vote distribution for one feature vector.

    The label is the argmax of the summed leaf class histograms; ties go to
    the lowest class index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != forest.num_features:
        raise ValueError(f"expected a vector of {forest.num_features} features, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("feature vector contains non-finite values")
    votes = forest.vote_counts(x[None, :])[0]
    label = int(np.argmax(votes))
    total = votes.sum()
    dist = votes / total if total > 0 else np.full(votes.size, 1.0 / votes.size)
    return label, dist


def predict_batch(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Predicted labels for every row of X (same rule as predict)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.num_features:
        raise ValueError(f"expected n x {forest.num_features} matrix, got shape {X.shape}")
    return np.argmax(forest.vote_counts(X), axis=1)


def predictor_importance(forest: Forest) -> ImportanceVector:
    """Per-feature total Gini impurity decrease, averaged over trees, plus its
    L2-normalized form."""
    return ImportanceVector(forest.raw_importance.copy())


def prune_features(imp: ImportanceVector, alpha: float) -> FeatureMask:
    """Keep predictors whose normalized importance strictly exceeds
    theta = alpha * mean(normalized importance)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    p_hat = imp.normalized
    if not (p_hat > 0).any():
        raise EmptySelectionError("importance is all zero; nothing to rank predictors by")
    theta = alpha * float(p_hat.sum()) / p_hat.size
    kept = np.flatnonzero(p_hat > theta)
    if kept.size == 0:
        raise EmptySelectionError(
            f"no predictor has normalized importance > {theta:.6g} (alpha={alpha:g} too large)"
        )
    return FeatureMask(kept, theta, alpha)


def train_pipeline(X, y, hp: HyperParams, num_classes: Optional[int] = None):
    """Stage 1 prunes predictors with a forest's importance ranking; stage 2
    trains the classifier forest on the kept columns.

    Returns (FeatureMask, Forest); apply the mask before the classifier when
    predicting (see predict_pipeline).
    """
    pruner = train_forest(X, y, hp.pruning_trees, hp.rng_seed, num_classes)
    mask = prune_features(predictor_importance(pruner), hp.alpha)
    X = np.asarray(X, dtype=np.float64)
    classifier = train_forest(mask.apply(X), y, hp.classifier_trees, hp.rng_seed + 1, num_classes)
    return mask, classifier


def predict_pipeline(mask: FeatureMask, classifier: Forest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return predict_batch(classifier, mask.apply(X))


FORMAT_NAME = "hdgkit-forest-model"
FORMAT_VERSION = 1


def save_model(path, hp: HyperParams, mask: FeatureMask, forest: Forest, extra: Optional[dict] = None):
    """Persist hyperparameters, feature mask and all tree node arrays to one
    .npz file. Reloading reproduces predictions bitwise."""
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "hyperparams": asdict(hp),
        "theta": mask.theta,
        "alpha": mask.alpha,
        "num_classes": forest.num_classes,
        "num_features": forest.num_features,
        "num_trees": len(forest.trees),
        "extra": extra or {},
    }
    offsets = np.cumsum([0] + [t.num_nodes for t in forest.trees])
    arrays = {
        "meta_json": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        "kept_indices": mask.kept_indices,
        "tree_offsets": offsets.astype(np.int64),
        "feature": np.concatenate([t.feature for t in forest.trees]),
        "threshold": np.concatenate([t.threshold for t in forest.trees]),
        "left": np.concatenate([t.left for t in forest.trees]),
        "right": np.concatenate([t.right for t in forest.trees]),
        "counts": np.concatenate([t.counts for t in forest.trees]),
        "raw_importance": forest.raw_importance,
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    """Inverse of save_model; returns (HyperParams, FeatureMask, Forest, extra)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        if meta.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a {FORMAT_NAME} file")
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format version {meta.get('version')}")
        offsets = data["tree_offsets"]
        trees = []
        for i in range(offsets.size - 1):
            lo, hi = offsets[i], offsets[i + 1]
            trees.append(
                DecisionTree(
                    feature=data["feature"][lo:hi],
                    threshold=data["threshold"][lo:hi],
                    left=data["left"][lo:hi],
                    right=data["right"][lo:hi],
                    counts=data["counts"][lo:hi],
                )
            )
        forest = Forest(trees, meta["num_classes"], meta["num_features"], data["raw_importance"])
        mask = FeatureMask(data["kept_indices"], meta["theta"], meta["alpha"])
        hp = HyperParams(**meta["hyperparams"])
        return hp, mask, forest, meta["extra"]
