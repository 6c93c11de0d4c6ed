"""Random-forest slice classifier (basal / mid-ventricle / apical).

Trees are CART with Gini impurity. Split candidates are midpoints between
consecutive distinct feature values; among equally good splits the lowest
feature index wins, then the lowest threshold.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyClass, IoFailure, LengthMismatch, TooFewSamples

if TYPE_CHECKING:
    from .features import FeatureVector

MODEL_MAGIC = "lvseg-random-forest"
MODEL_VERSION = 1
_TIE_TOL = 1e-12


class SliceClass(str, Enum):
    BASAL = "Basal"
    MID = "MidVentricle"
    APICAL = "Apical"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @classmethod
    def parse(cls, text: str) -> "SliceClass":
        key = text.strip().lower().replace("-", "").replace("_", "")
        aliases = {"basal": cls.BASAL, "b": cls.BASAL, "midventricle": cls.MID, "mid": cls.MID,
                   "m": cls.MID, "apical": cls.APICAL, "a": cls.APICAL}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown slice class {text!r}") from None


CLASS_ORDER = (SliceClass.BASAL, SliceClass.MID, SliceClass.APICAL)
N_CLASSES = len(CLASS_ORDER)


@dataclass(frozen=True)
class ForestHyper:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    features_per_split: int | None = None  # None: floor(sqrt(d))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")

    def split_features(self, dim: int) -> int:
        m = self.features_per_split or max(1, math.isqrt(dim))
        return min(m, dim)


@dataclass
class DecisionTree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray     # (n_nodes, N_CLASSES)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            nd = node[active]
            go_left = X[rows[active], self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        # argmax resolves ties by class order
        return np.argmax(self.counts[self.leaf_index(X)], axis=1)


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    hyper: ForestHyper
    feature_dim: int
    class_order: tuple[SliceClass, ...] = field(default=CLASS_ORDER)

    def votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise DimensionMismatch(f"model expects {self.feature_dim} features, got {X.shape[1]}")
        out = np.zeros((len(X), N_CLASSES), dtype=np.int64)
        for tree in self.trees:
            out[np.arange(len(X)), tree.predict_index(X)] += 1
        return out

    def predict(self, X: np.ndarray) -> list[SliceClass]:
        return [CLASS_ORDER[i] for i in np.argmax(self.votes(X), axis=1)]


@dataclass
class CvReport:
    fold_accuracies: list[float]
    mean_accuracy: float


# ---------------------------------------------------------------------------
# tree growing


def _as_arrays(data: Sequence["FeatureVector"]) -> tuple[np.ndarray, np.ndarray]:
    if not data:
        raise TooFewSamples("no training samples")
    dims = {len(f.values) for f in data}
    if len(dims) != 1:
        raise DimensionMismatch(f"feature vectors have mixed dimensions {sorted(dims)}")
    if any(f.label is None for f in data):
        raise ValueError("every feature vector must carry a label")
    X = np.stack([f.values for f in data])
    y = np.array([f.label.index for f in data], dtype=np.int64)
    return X, y


def best_split(Xs: np.ndarray, y: np.ndarray, features: np.ndarray):
    """Best Gini split given the candidate columns ``Xs`` (one per entry of the
    ascending ``features``).

    Returns ``(feature, threshold, score)`` or ``None`` when no feature has two
    distinct values. ``score`` is sum_k L_k^2/n_L + sum_k R_k^2/n_R, which
    orders splits the same way as the weighted Gini decrease.
    """
    n = len(y)
    if n < 2:
        return None
    order = np.argsort(Xs, axis=0, kind="stable")
    vals = np.take_along_axis(Xs, order, axis=0)
    onehot = np.eye(N_CLASSES)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]          # (n-1, m, K)
    right = onehot.sum(axis=0) - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    score = (left ** 2).sum(axis=2) / n_left + (right ** 2).sum(axis=2) / (n - n_left)
    valid = vals[:-1] < vals[1:]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf).T               # feature-major
    best = score.max()
    flat = np.flatnonzero(score.ravel() >= best - _TIE_TOL * abs(best))[0]
    j, i = divmod(int(flat), n - 1)
    lo, hi = vals[i, j], vals[i + 1, j]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(features[j]), float(thr), float(best)


def grow_tree(X: np.ndarray, y: np.ndarray, hyper: ForestHyper,
              rng: np.random.Generator) -> DecisionTree:
    d = X.shape[1]
    m = hyper.split_features(d)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=N_CLASSES))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if (len(idx) < hyper.min_samples_split or np.count_nonzero(c) <= 1
                or (hyper.max_depth is not None and depth >= hyper.max_depth)):
            continue
        feats = np.arange(d) if m == d else np.sort(rng.choice(d, size=m, replace=False))
        split = best_split(X[np.ix_(idx, feats)], y[idx], feats)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(counts, dtype=np.int64).reshape(-1, N_CLASSES))


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tree_index]))


def train_forest(train: Sequence["FeatureVector"], hyper: ForestHyper = ForestHyper(),
                 workers: int = 1) -> RandomForestModel:
    X, y = _as_arrays(train)

    def one(i):
        rng = tree_rng(hyper.seed, i)
        if hyper.bootstrap:
            sample = rng.integers(0, len(y), len(y))
            return grow_tree(X[sample], y[sample], hyper, rng)
        return grow_tree(X, y, hyper, rng)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(one, range(hyper.n_trees)))
    else:
        trees = [one(i) for i in range(hyper.n_trees)]
    return RandomForestModel(trees, hyper, X.shape[1])


def predict_class(model: RandomForestModel, f: "FeatureVector | np.ndarray") -> SliceClass:
    values = f.values if hasattr(f, "values") else np.asarray(f)
    return model.predict(values[None, :])[0]


def majority_vote(votes: Sequence[SliceClass]) -> SliceClass:
    counts = np.bincount([v.index for v in votes], minlength=N_CLASSES)
    return CLASS_ORDER[int(np.argmax(counts))]


# ---------------------------------------------------------------------------
# evaluation


def _class_groups(data: Sequence["FeatureVector"]) -> list[np.ndarray]:
    labels = np.array([f.label.index for f in data])
    return [np.flatnonzero(labels == k) for k in range(N_CLASSES)]


def stratified_split(data: Sequence["FeatureVector"], train_ratio: float = 0.8, seed: int = 0):
    if not 0 < train_ratio < 1:
        raise ValueError("train_ratio must lie in (0, 1)")
    if any(f.label is None for f in data):
        raise ValueError("every feature vector must carry a label")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls, members in zip(CLASS_ORDER, _class_groups(data)):
        if len(members) < 2:
            raise EmptyClass(f"class {cls.value} has {len(members)} samples, need at least 2")
        perm = rng.permutation(members)
        k = min(max(int(math.floor(train_ratio * len(members) + 0.5)), 1), len(members) - 1)
        train_idx.extend(perm[:k])
        test_idx.extend(perm[k:])
    return [data[i] for i in sorted(train_idx)], [data[i] for i in sorted(test_idx)]


def stratified_folds(data: Sequence["FeatureVector"], k: int, seed: int = 0) -> list[np.ndarray]:
    if k < 2:
        raise TooFewSamples("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for cls, members in zip(CLASS_ORDER, _class_groups(data)):
        if len(members) < k:
            raise TooFewSamples(f"class {cls.value} has {len(members)} samples, fewer than k={k}")
        for pos, i in enumerate(rng.permutation(members)):
            folds[pos % k].append(int(i))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def cross_validate(data: Sequence["FeatureVector"], k: int = 10,
                   hyper: ForestHyper = ForestHyper(), workers: int = 1) -> CvReport:
    if any(f.label is None for f in data):
        raise ValueError("every feature vector must carry a label")
    folds = stratified_folds(data, k, hyper.seed)
    X = np.stack([f.values for f in data])
    truth = [f.label for f in data]
    accuracies = []
    for test in folds:
        held = set(test.tolist())
        train = [f for i, f in enumerate(data) if i not in held]
        model = train_forest(train, hyper, workers)
        pred = model.predict(X[test])
        accuracies.append(float(np.mean([p == truth[i] for p, i in zip(pred, test)])))
    return CvReport(accuracies, float(np.mean(accuracies)))


def classification_report(pred: Sequence[SliceClass], truth: Sequence[SliceClass]):
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions for {len(truth)} labels")
    if not pred:
        raise LengthMismatch("empty prediction list")
    out = {}
    for cls in CLASS_ORDER:
        tp = sum(p == cls and t == cls for p, t in zip(pred, truth))
        fp = sum(p == cls and t != cls for p, t in zip(pred, truth))
        fn = sum(p != cls and t == cls for p, t in zip(pred, truth))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[cls] = {"precision": precision, "recall": recall, "f1": f1}
    return out


# ---------------------------------------------------------------------------
# persistence


def dumps_model(model: RandomForestModel) -> str:
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"feature_dim {model.feature_dim}",
        "classes " + " ".join(c.value for c in model.class_order),
        "hyper " + json.dumps(asdict(model.hyper), sort_keys=True),
        f"trees {len(model.trees)}",
    ]
    for t, tree in enumerate(model.trees):
        lines.append(f"tree {t} nodes {tree.n_nodes}")
        for i in range(tree.n_nodes):
            lines.append(" ".join([str(tree.feature[i]), repr(float(tree.threshold[i])),
                                   str(tree.left[i]), str(tree.right[i])]
                                  + [str(c) for c in tree.counts[i]]))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> RandomForestModel:
    lines = iter(text.splitlines())
    try:
        magic, version = next(lines).split()
        if magic != MODEL_MAGIC or int(version) != MODEL_VERSION:
            raise IoFailure(f"not a version-{MODEL_VERSION} forest file")
        dim = int(next(lines).split()[1])
        next(lines)
        hyper = ForestHyper(**json.loads(next(lines).split(" ", 1)[1]))
        n_trees = int(next(lines).split()[1])
        trees = []
        for _ in range(n_trees):
            n_nodes = int(next(lines).split()[3])
            rows = [next(lines).split() for _ in range(n_nodes)]
            trees.append(DecisionTree(
                np.array([int(r[0]) for r in rows], dtype=np.int64),
                np.array([float(r[1]) for r in rows]),
                np.array([int(r[2]) for r in rows], dtype=np.int64),
                np.array([int(r[3]) for r in rows], dtype=np.int64),
                np.array([[int(c) for c in r[4:]] for r in rows], dtype=np.int64)
                .reshape(-1, N_CLASSES)))
    except (StopIteration, ValueError, IndexError) as exc:
        raise IoFailure(f"malformed forest file: {exc}") from exc
    return RandomForestModel(trees, hyper, dim)


def save_model(model: RandomForestModel, path: str | Path) -> None:
    try:
        Path(path).write_text(dumps_model(model))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path: str | Path) -> RandomForestModel:
    try:
        return loads_model(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
