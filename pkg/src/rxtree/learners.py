"""In-house tree learners and model-quality metrics.

Everything here works on plain numpy design matrices.  Categorical columns
hold level indices and split one-vs-rest on single levels; numeric and binary
columns split on thresholds (midpoints of sorted unique training values,
capped at ``n_candidate_thresholds``).  All fitting is sequential and
seed-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class TreeLearnerConfig:
    max_depth: int = 3
    min_samples_leaf: int = 1
    n_candidate_thresholds: int = 32

    def __post_init__(self):
        if not 1 <= self.max_depth <= 32:
            raise LearnerError("max_depth must lie in [1, 32]")
        if self.min_samples_leaf < 1:
            raise LearnerError("min_samples_leaf must be >= 1")
        if self.n_candidate_thresholds < 1:
            raise LearnerError("n_candidate_thresholds must be >= 1")


@dataclass(frozen=True)
class EnsembleConfig:
    kind: str  # "bagged" | "boosted"
    n_estimators: int = 100
    learning_rate: float = 0.1
    subsample: float = 1.0
    base: TreeLearnerConfig = field(default_factory=TreeLearnerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("bagged", "boosted"):
            raise LearnerError(f"unknown ensemble kind {self.kind!r}")
        if self.n_estimators < 1:
            raise LearnerError("n_estimators must be >= 1")
        if self.kind == "boosted" and not 0.0 < self.learning_rate <= 1.0:
            raise LearnerError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise LearnerError("subsample must lie in (0, 1]")


def candidate_thresholds(values: np.ndarray, k: int) -> np.ndarray:
    """Midpoints of sorted unique values, thinned evenly to at most ``k``."""
    u = np.unique(values[~np.isnan(values)])
    if u.size < 2:
        return np.empty(0)
    mids = (u[:-1] + u[1:]) / 2.0
    if mids.size > k:
        pick = np.unique(np.round(np.linspace(0, mids.size - 1, k)).astype(int))
        mids = mids[pick]
    return mids


def bin_columns(
    X: np.ndarray, categorical: np.ndarray, k: int
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-column split candidates and the binned matrix.

    For numeric columns bin b counts the candidates <= x, so the rows going
    left under ``x < thresholds[j]`` are exactly those with bin <= j.  For
    categorical columns the bin is the level index and candidate j splits
    rows with bin == j to the left.
    """
    n, p = X.shape
    cands: list[np.ndarray] = []
    bins = np.zeros((n, p), dtype=np.intp)
    for j in range(p):
        col = X[:, j]
        if categorical[j]:
            levels = np.unique(col).astype(int)
            cands.append(levels.astype(float))
            bins[:, j] = col.astype(np.intp)
        else:
            th = candidate_thresholds(col, k)
            cands.append(th)
            bins[:, j] = np.searchsorted(th, col, side="right")
    return cands, bins


class _Binned:
    """Shared binning for one training matrix."""

    def __init__(self, X: np.ndarray, categorical: Optional[np.ndarray], k: int):
        n, p = X.shape
        if categorical is None:
            categorical = np.zeros(p, dtype=bool)
        self.categorical = np.asarray(categorical, dtype=bool)
        self.candidates, self.bins = bin_columns(X, self.categorical, k)
        self.n_bins = [
            int(self.bins[:, j].max()) + 1 if n else 1 for j in range(p)
        ]
        self.p = p


@dataclass
class _Tree:
    """Flat-array regression tree."""

    feature: np.ndarray
    threshold: np.ndarray
    is_cat: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        pos = np.zeros(X.shape[0], dtype=np.intp)
        while True:
            internal = self.feature[pos] >= 0
            if not internal.any():
                return self.value[pos]
            idx = np.nonzero(internal)[0]
            f = self.feature[pos[idx]]
            v = X[idx, f]
            th = self.threshold[pos[idx]]
            go_left = np.where(self.is_cat[pos[idx]], v == th, v < th)
            pos[idx] = np.where(go_left, self.left[pos[idx]], self.right[pos[idx]])

    def to_doc(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "is_cat": self.is_cat.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }


def _fit_tree(
    binned: _Binned,
    rows: np.ndarray,
    g: np.ndarray,
    config: TreeLearnerConfig,
    importance: np.ndarray,
) -> _Tree:
    """CART regression tree on (rows, g) minimizing squared error.

    Split gain is the standard variance-reduction identity
    S_L^2/n_L + S_R^2/n_R - S^2/n; accumulated per feature into ``importance``.
    """
    feature, threshold, is_cat, left, right, value = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        is_cat.append(False)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    min_leaf = config.min_samples_leaf

    def best_split(r: np.ndarray):
        n = r.size
        total = float(g[r].sum())
        base = total * total / n
        best = (1e-12, -1, -1)  # (gain, feature, candidate index)
        for j in range(binned.p):
            cand = binned.candidates[j]
            if cand.size == 0:
                continue
            b = binned.bins[r, j]
            nb = binned.n_bins[j]
            cnt = np.bincount(b, minlength=nb).astype(float)
            s = np.bincount(b, weights=g[r], minlength=nb)
            if binned.categorical[j]:
                lev = cand.astype(int)
                nl = cnt[lev]
                sl = s[lev]
            else:
                nl = np.cumsum(cnt)[: cand.size]
                sl = np.cumsum(s)[: cand.size]
            nr = n - nl
            valid = (nl >= min_leaf) & (nr >= min_leaf)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = sl * sl / nl + (total - sl) * (total - sl) / nr - base
            gain = np.where(valid, gain, -np.inf)
            jbest = int(np.argmax(gain))
            if gain[jbest] > best[0]:
                best = (float(gain[jbest]), j, jbest)
        return best

    def grow(r: np.ndarray, depth: int) -> int:
        node = new_node()
        value[node] = float(g[r].mean())
        if depth >= config.max_depth or r.size < 2 * min_leaf:
            return node
        gain, j, c = best_split(r)
        if j < 0:
            return node
        importance[j] += gain
        cand = binned.candidates[j]
        if binned.categorical[j]:
            mask = binned.bins[r, j] == c
        else:
            mask = binned.bins[r, j] <= c
        feature[node] = j
        threshold[node] = float(cand[c])
        is_cat[node] = bool(binned.categorical[j])
        left[node] = grow(r[mask], depth + 1)
        right[node] = grow(r[~mask], depth + 1)
        return node

    grow(rows, 0)
    return _Tree(
        np.array(feature, dtype=np.intp),
        np.array(threshold, dtype=float),
        np.array(is_cat, dtype=bool),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value, dtype=float),
    )


def _sample_rows(rng: np.random.Generator, n: int, subsample: float) -> np.ndarray:
    # subsample == 1 keeps the identity sample so a 1-tree bag equals a plain tree fit
    if subsample >= 1.0:
        return np.arange(n)
    m = max(1, int(round(subsample * n)))
    return np.sort(rng.choice(n, size=m, replace=False))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _log_loss(y: np.ndarray, prob: np.ndarray) -> float:
    p = np.clip(prob, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class ProbabilisticClassifier:
    """Fitted ensemble emitting P(label = 1); immutable and thread-safe."""

    kind: str  # "bagged" | "boosted" | "constant"
    config: Optional[EnsembleConfig]
    n_features: int
    trees: tuple[_Tree, ...] = ()
    base_score: float = 0.0  # log-odds offset (boosted) or constant probability
    feature_importances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_losses: tuple[float, ...] = ()

    def predict_proba_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LearnerError(f"expected a matrix with {self.n_features} columns")
        if np.isnan(X).any():
            raise LearnerError("missing values in input; impute upstream")
        if self.kind == "constant":
            return np.full(X.shape[0], self.base_score)
        if self.kind == "bagged":
            out = np.zeros(X.shape[0])
            for t in self.trees:
                out += t.predict(X)
            return np.clip(out / len(self.trees), 0.0, 1.0)
        z = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            z += self.config.learning_rate * t.predict(X)
        return _sigmoid(z)

    def to_doc(self) -> dict:
        """JSON-serializable audit document (not a stable cross-version format)."""
        return {
            "kind": self.kind,
            "config": None if self.config is None else {
                "kind": self.config.kind,
                "n_estimators": self.config.n_estimators,
                "learning_rate": self.config.learning_rate,
                "subsample": self.config.subsample,
                "max_depth": self.config.base.max_depth,
                "min_samples_leaf": self.config.base.min_samples_leaf,
                "n_candidate_thresholds": self.config.base.n_candidate_thresholds,
                "seed": self.config.seed,
            },
            "n_features": self.n_features,
            "base_score": self.base_score,
            "trees": [t.to_doc() for t in self.trees],
        }


def constant_classifier(rate: float, n_features: int) -> ProbabilisticClassifier:
    """Classifier that always predicts ``rate`` (degenerate or deliberately
    misspecified model)."""
    return ProbabilisticClassifier(
        kind="constant",
        config=None,
        n_features=n_features,
        base_score=float(rate),
        feature_importances=np.zeros(n_features),
    )


@dataclass(frozen=True)
class BaggedRegressor:
    config: EnsembleConfig
    n_features: int
    trees: tuple[_Tree, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out / len(self.trees)


def fit_bagged_regressor(
    X: np.ndarray,
    y: np.ndarray,
    config: EnsembleConfig,
    categorical: Optional[np.ndarray] = None,
) -> BaggedRegressor:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    binned = _Binned(X, categorical, config.base.n_candidate_thresholds)
    rng = np.random.default_rng(config.seed)
    importance = np.zeros(binned.p)
    trees = tuple(
        _fit_tree(binned, _sample_rows(rng, X.shape[0], config.subsample), y, config.base, importance)
        for _ in range(config.n_estimators)
    )
    return BaggedRegressor(config, X.shape[1], trees)


def fit_classifier(
    X: np.ndarray,
    y: np.ndarray,
    config: EnsembleConfig,
    categorical: Optional[np.ndarray] = None,
) -> ProbabilisticClassifier:
    """Fit a bagged or boosted tree classifier on a binary label.

    A single-class label yields a constant-probability classifier emitting the
    observed class rate rather than raising.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise LearnerError("X and y disagree on the number of rows")
    if X.shape[0] < 2:
        raise LearnerError("need at least two rows to fit")
    if not np.isin(y, (0.0, 1.0)).all():
        raise LearnerError("labels must be binary")
    if np.isnan(X).any():
        raise LearnerError("missing values in training data; impute upstream")

    rate = float(y.mean())
    if rate in (0.0, 1.0):
        return constant_classifier(rate, X.shape[1])

    binned = _Binned(X, categorical, config.base.n_candidate_thresholds)
    rng = np.random.default_rng(config.seed)
    importance = np.zeros(binned.p)
    n = X.shape[0]

    if config.kind == "bagged":
        trees = tuple(
            _fit_tree(binned, _sample_rows(rng, n, config.subsample), y, config.base, importance)
            for _ in range(config.n_estimators)
        )
        losses = ()
    else:
        # stagewise regression trees on logistic gradients
        f0 = float(np.log(rate / (1.0 - rate)))
        z = np.full(n, f0)
        trees_l = []
        losses_l = []
        for _ in range(config.n_estimators):
            resid = y - _sigmoid(z)
            rows = _sample_rows(rng, n, config.subsample)
            tree = _fit_tree(binned, rows, resid, config.base, importance)
            z += config.learning_rate * tree.predict(X)
            trees_l.append(tree)
            losses_l.append(_log_loss(y, _sigmoid(z)))
        trees = tuple(trees_l)
        losses = tuple(losses_l)

    total = importance.sum()
    importances = importance / total if total > 0 else np.zeros(binned.p)
    return ProbabilisticClassifier(
        kind=config.kind,
        config=config,
        n_features=X.shape[1],
        trees=trees,
        base_score=f0 if config.kind == "boosted" else 0.0,
        feature_importances=importances,
        train_losses=losses,
    )


def predict_proba(model: ProbabilisticClassifier, x: Sequence[float]) -> float:
    """Probability for a single complete feature vector."""
    arr = np.asarray(x, dtype=float).reshape(1, -1)
    return float(model.predict_proba_matrix(arr)[0])


def feature_importance(model: ProbabilisticClassifier) -> np.ndarray:
    """Normalized impurity-decrease totals; all zero when the model never splits."""
    return model.feature_importances.copy()


def auc_roc(labels: Sequence[float], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(equal)."""
    y = np.asarray(labels, dtype=float)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape:
        raise LearnerError("labels and scores must have equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise LearnerError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="stable")
    ranks = np.empty_like(s)
    sorted_s = s[order]
    # midranks for ties
    i = 0
    pos = 1.0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (pos + (pos + (j - i))) / 2.0
        pos += j - i + 1
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per row, label-stratified, deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    folds = np.zeros(y.shape[0], dtype=int)
    for label in (0.0, 1.0):
        idx = np.nonzero(y == label)[0]
        idx = rng.permutation(idx)
        folds[idx] = np.arange(idx.size) % k
    return folds


def cross_validated_select(
    X: np.ndarray,
    y: np.ndarray,
    grid: Sequence[EnsembleConfig],
    k: int,
    seed: int = 0,
    categorical: Optional[np.ndarray] = None,
) -> EnsembleConfig:
    """Grid entry with the highest mean out-of-fold AUC; ties break to the
    earliest grid position.  A single-class fold scores 0.5 by convention."""
    if not grid:
        raise LearnerError("grid must be non-empty")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if k < 2:
        raise LearnerError("k must be >= 2")
    if y.shape[0] < k:
        raise LearnerError("need at least k rows")
    folds = _stratified_folds(y, k, seed)
    best_cfg = grid[0]
    best_auc = -1.0
    for cfg in grid:
        aucs = []
        for f in range(k):
            tr = folds != f
            te = ~tr
            if y[te].size == 0:
                continue
            if y[tr].min() == y[tr].max():
                aucs.append(0.5)
                continue
            model = fit_classifier(X[tr], y[tr], cfg, categorical=categorical)
            if y[te].min() == y[te].max():
                aucs.append(0.5)
            else:
                aucs.append(auc_roc(y[te], model.predict_proba_matrix(X[te])))
        mean_auc = float(np.mean(aucs))
        if mean_auc > best_auc + 1e-12:
            best_auc = mean_auc
            best_cfg = cfg
    return best_cfg


def calibration_curve(
    labels: Sequence[float],
    scores: Sequence[float],
    n_buckets: int = 10,
    trim: float = 0.05,
) -> list[tuple[float, float, int]]:
    """Equal-count score buckets after trimming trim/2 mass from each tail;
    returns (mean_score, observed_rate, count) per non-empty bucket."""
    y = np.asarray(labels, dtype=float)
    s = np.asarray(scores, dtype=float)
    if n_buckets < 1:
        raise LearnerError("n_buckets must be >= 1")
    if not 0.0 <= trim < 0.5:
        raise LearnerError("trim must lie in [0, 0.5)")
    order = np.argsort(s, kind="stable")
    drop = int(trim / 2.0 * s.size)
    kept = order[drop : s.size - drop] if drop else order
    out = []
    for chunk in np.array_split(kept, min(n_buckets, kept.size)):
        if chunk.size == 0:
            continue
        out.append((float(s[chunk].mean()), float(y[chunk].mean()), int(chunk.size)))
    return out
