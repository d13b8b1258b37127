"""Prescription trees: fitting, routing, serialization.

The tree minimizes the total reward of its prescriptions,

    sum_i reward[i, tree(x_i)]  +  lambda * (#internal nodes) * mean|reward|,

by coordinate descent over a finite move set (replace a split, collapse a
subtree, split a leaf, and -- once the cheap moves stall -- replace a node's
subtree with its best depth-<=2 refit), restarted from randomized greedy
trees.  Split candidates are the same midpoint thresholds the base learners
use, which keeps the search space finite and lets an exhaustive oracle verify
small instances.

Routing rule everywhere (library, JSON format, calculator): a numeric value
goes left iff value < threshold, so a value exactly at the threshold goes
right; a categorical value goes left iff its level is in the split's subset.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .data import Cohort, Feature, FeatureSchema, TreatmentSet, CATEGORICAL, make_rng
from .counterfactual import OutcomePredictions, RewardMatrix
from .learners import bin_columns

TREE_FORMAT_VERSION = 1


class PolicyError(ValueError):
    pass


class TreeImportError(PolicyError):
    pass


@dataclass(frozen=True)
class LeafStats:
    """Per-treatment training statistics of one leaf, in treatment order."""

    counts: tuple[int, ...]
    historical_rates: tuple[Optional[float], ...]
    mean_estimates: tuple[Optional[float], ...]


@dataclass(frozen=True)
class Node:
    """Split node (feature + threshold or level subset) or leaf (prescription)."""

    id: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    levels: Optional[tuple[str, ...]] = None
    left: Optional[int] = None
    right: Optional[int] = None
    prescription: Optional[int] = None
    n_train: int = 0
    stats: Optional[LeafStats] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class PolicyTree:
    schema: FeatureSchema
    treatments: TreatmentSet
    nodes: tuple[Node, ...]
    root: int = 1
    bounds: Optional[tuple[Optional[tuple[float, float]], ...]] = None

    @cached_property
    def by_id(self) -> dict[int, Node]:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise PolicyError("duplicate node ids")
        return {n.id: n for n in self.nodes}

    @cached_property
    def leaves(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.is_leaf)

    @cached_property
    def max_path_internals(self) -> int:
        def depth(nid: int) -> int:
            node = self.by_id[nid]
            if node.is_leaf:
                return 0
            return 1 + max(depth(node.left), depth(node.right))

        return depth(self.root)

    @cached_property
    def used_features(self) -> tuple[int, ...]:
        """Indices of features the tree actually splits on, in schema order."""
        used = {n.feature for n in self.nodes if not n.is_leaf}
        return tuple(j for j in range(len(self.schema)) if j in used)


@dataclass(frozen=True)
class OptConfig:
    max_depth: int = 8
    min_samples_leaf: int = 50
    complexity_grid: tuple[float, ...] = (0.0, 1.0, 3.0, 10.0, 30.0)
    validation_fraction: float = 0.15
    n_restarts: int = 10
    n_candidate_thresholds: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 0:
            raise PolicyError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise PolicyError("min_samples_leaf must be >= 1")
        grid = tuple(float(v) for v in self.complexity_grid)
        if not grid or sorted(grid) != list(grid) or grid[0] != 0.0 or any(v < 0 for v in grid):
            raise PolicyError("complexity_grid must be ascending, non-negative, and contain 0")
        if not 0.0 < self.validation_fraction < 0.5:
            raise PolicyError("validation_fraction must lie in (0, 0.5)")
        if self.n_restarts < 1:
            raise PolicyError("n_restarts must be >= 1")


# ---------------------------------------------------------------------------
# routing


def _route_matrix(
    tree: PolicyTree,
    X: np.ndarray,
    col_of: Sequence[int],
    level_codes: dict[int, np.ndarray],
) -> np.ndarray:
    """Leaf node id per row.

    ``col_of[j]`` maps tree feature j to an X column; ``level_codes`` maps a
    categorical split node's id to the level codes (in X's encoding) that
    route left.
    """
    n = X.shape[0]
    pos = np.full(n, tree.root, dtype=np.intp)
    by_id = tree.by_id
    max_id = max(by_id) + 1
    feat = np.full(max_id, -1, dtype=np.intp)
    thr = np.zeros(max_id)
    is_cat = np.zeros(max_id, dtype=bool)
    left = np.zeros(max_id, dtype=np.intp)
    right = np.zeros(max_id, dtype=np.intp)
    for node in tree.nodes:
        if node.is_leaf:
            continue
        feat[node.id] = col_of[node.feature]
        left[node.id] = node.left
        right[node.id] = node.right
        if node.levels is not None:
            is_cat[node.id] = True
        else:
            thr[node.id] = node.threshold
    while True:
        internal = feat[pos] >= 0
        if not internal.any():
            return pos
        idx = np.nonzero(internal)[0]
        p = pos[idx]
        v = X[idx, feat[p]]
        if np.isnan(v).any():
            raise PolicyError("missing value encountered while routing; impute upstream")
        go_left = np.empty(idx.size, dtype=bool)
        cat_rows = is_cat[p]
        go_left[~cat_rows] = v[~cat_rows] < thr[p[~cat_rows]]
        for k in np.nonzero(cat_rows)[0]:
            go_left[k] = v[k] in level_codes[int(p[k])]
        pos[idx] = np.where(go_left, left[p], right[p])


def _resolve_columns(tree: PolicyTree, schema: FeatureSchema) -> tuple[list[int], dict[int, np.ndarray]]:
    """Map tree features onto a cohort schema by name, checking kinds and
    translating categorical split levels into the cohort's level codes."""
    col_of = [0] * len(tree.schema)
    for j in tree.used_features:
        f = tree.schema[j]
        try:
            c = schema.index(f.name)
        except KeyError:
            raise PolicyError(f"cohort schema is missing feature {f.name!r} used by the tree") from None
        if schema[c].kind != f.kind:
            raise PolicyError(
                f"feature {f.name!r} is {schema[c].kind} in the cohort but {f.kind} in the tree"
            )
        col_of[j] = c
    level_codes: dict[int, np.ndarray] = {}
    for node in tree.nodes:
        if node.is_leaf or node.levels is None:
            continue
        target = schema[col_of[node.feature]]
        unknown = [lv for lv in node.levels if lv not in target.levels]
        if unknown:
            raise PolicyError(
                f"cohort feature {target.name!r} lacks level(s) {unknown} used by the tree"
            )
        level_codes[node.id] = np.array([target.levels.index(lv) for lv in node.levels], dtype=float)
    return col_of, level_codes


def route_cohort(tree: PolicyTree, cohort: Cohort) -> np.ndarray:
    """Leaf node id per cohort record, resolving tree features by name."""
    col_of, level_codes = _resolve_columns(tree, cohort.schema)
    return _route_matrix(tree, cohort.feature_matrix, col_of, level_codes)


def prescribed_arms(tree: PolicyTree, cohort: Cohort) -> np.ndarray:
    leaf_ids = route_cohort(tree, cohort)
    arm_of = {n.id: n.prescription for n in tree.leaves}
    return np.array([arm_of[int(l)] for l in leaf_ids], dtype=np.intp)


def prescribe(tree: PolicyTree, x: Sequence) -> tuple[str, int, Optional[LeafStats]]:
    """Route one complete feature vector; returns (treatment, leaf id, stats)."""
    values = list(x)
    if len(values) != len(tree.schema):
        raise PolicyError(f"expected {len(tree.schema)} feature values, got {len(values)}")
    node = tree.by_id[tree.root]
    while not node.is_leaf:
        v = values[node.feature]
        if v is None or (isinstance(v, float) and np.isnan(v)):
            raise PolicyError(
                f"feature {tree.schema[node.feature].name!r} is missing; impute before prescribing"
            )
        if node.levels is not None:
            go_left = v in node.levels
        else:
            go_left = float(v) < node.threshold
        node = tree.by_id[node.left if go_left else node.right]
    return tree.treatments.treatments[node.prescription], node.id, node.stats


def policy_objective(tree: PolicyTree, cohort: Cohort, reward: RewardMatrix) -> float:
    """Total reward of the tree's prescriptions: sum_i reward[i, tree(x_i)]."""
    if reward.values.shape[0] != cohort.n:
        raise PolicyError("reward rows do not align with the cohort")
    arms = prescribed_arms(tree, cohort)
    return float(reward.values[np.arange(cohort.n), arms].sum())


# ---------------------------------------------------------------------------
# search machinery


class _Work:
    """Mutable tree under local search; node 0 is the root and never freed."""

    def __init__(self):
        self.feature = [-1]
        self.cand = [-1]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]

    def new_node(self, parent: int) -> int:
        self.feature.append(-1)
        self.cand.append(-1)
        self.left.append(-1)
        self.right.append(-1)
        self.parent.append(parent)
        return len(self.feature) - 1

    def is_leaf(self, v: int) -> bool:
        return self.feature[v] < 0

    def depth(self, v: int) -> int:
        d = 0
        while self.parent[v] >= 0:
            v = self.parent[v]
            d += 1
        return d

    def live_nodes(self) -> list[int]:
        out = []
        stack = [0]
        while stack:
            v = stack.pop()
            out.append(v)
            if not self.is_leaf(v):
                stack.extend((self.left[v], self.right[v]))
        return out

    def subtree_internal_count(self, v: int) -> int:
        count = 0
        stack = [v]
        while stack:
            u = stack.pop()
            if not self.is_leaf(u):
                count += 1
                stack.extend((self.left[u], self.right[u]))
        return count

    def subtree_leaves(self, v: int) -> list[int]:
        out = []
        stack = [v]
        while stack:
            u = stack.pop()
            if self.is_leaf(u):
                out.append(u)
            else:
                stack.extend((self.right[u], self.left[u]))
        return out


class _Search:
    """Shared state for one (data, reward, constraints) search problem."""

    def __init__(self, X, gamma, categorical, max_depth, min_leaf, n_thresholds,
                 binning: Optional[tuple[list[np.ndarray], np.ndarray, list[int]]] = None):
        self.gamma = gamma
        self.n, self.n_t = gamma.shape
        self.categorical = categorical
        self.p = X.shape[1]
        if binning is None:
            self.candidates, self.bins = bin_columns(X, categorical, n_thresholds)
            self.n_bins = [
                (self.candidates[j].size + 1)
                if not categorical[j]
                else (int(self.bins[:, j].max()) + 1 if self.n else 1)
                for j in range(self.p)
            ]
        else:
            self.candidates, self.bins, self.n_bins = binning
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    # -- routing on the work tree ------------------------------------------

    def go_left(self, rows: np.ndarray, f: int, c: int) -> np.ndarray:
        b = self.bins[rows, f]
        if self.categorical[f]:
            return b == self._cat_level(f, c)
        return b <= c

    def _cat_level(self, f: int, c: int) -> int:
        return int(self.candidates[f][c])

    def membership(self, work: _Work, v: int) -> np.ndarray:
        """Row indices reaching node v (path conditions from the root)."""
        path = []
        u = v
        while work.parent[u] >= 0:
            parent = work.parent[u]
            path.append((parent, u == work.left[parent]))
            u = parent
        rows = np.arange(self.n)
        for parent, took_left in reversed(path):
            mask = self.go_left(rows, work.feature[parent], work.cand[parent])
            rows = rows[mask] if took_left else rows[~mask]
        return rows

    def route_slots(self, work: _Work, rows: np.ndarray, start: int) -> tuple[np.ndarray, list[int]]:
        """Leaf slot per row when routed through the subtree at ``start``."""
        leaves = work.subtree_leaves(start)
        if len(leaves) == 1:
            return np.zeros(rows.size, dtype=np.intp), leaves
        slot = np.full(len(work.feature), -1, dtype=np.intp)
        for k, leaf in enumerate(leaves):
            slot[leaf] = k
        feat = np.array(work.feature, dtype=np.intp)
        cand = np.array(work.cand, dtype=np.intp)
        left = np.array(work.left, dtype=np.intp)
        right = np.array(work.right, dtype=np.intp)
        internal_mask = feat >= 0
        lev = np.zeros(feat.size, dtype=np.intp)
        node_cat = np.zeros(feat.size, dtype=bool)
        for u in np.nonzero(internal_mask)[0]:
            if self.categorical[feat[u]]:
                node_cat[u] = True
                lev[u] = self._cat_level(feat[u], cand[u])
        pos = np.full(rows.size, start, dtype=np.intp)
        while True:
            f = feat[pos]
            undone = f >= 0
            if not undone.any():
                break
            idx = np.nonzero(undone)[0]
            p = pos[idx]
            b = self.bins[rows[idx], f[idx]]
            go_left = np.where(node_cat[p], b == lev[p], b <= cand[p])
            pos[idx] = np.where(go_left, left[p], right[p])
        return slot[pos], leaves

    def leaf_contribution(self, rows: np.ndarray, slots: np.ndarray, n_leaves: int) -> float:
        """sum over leaves of min_t leaf reward sums."""
        sums = np.stack(
            [np.bincount(slots, weights=self.gamma[rows, t], minlength=n_leaves) for t in range(self.n_t)],
            axis=1,
        )
        return float(sums.min(axis=1).sum())

    def subtree_objective(self, work: _Work, v: int, rows: np.ndarray) -> float:
        slots, leaves = self.route_slots(work, rows, v)
        return self.leaf_contribution(rows, slots, len(leaves))

    # -- candidate split evaluation ----------------------------------------

    def best_partition(
        self,
        rows: np.ndarray,
        slots_l: np.ndarray,
        n_leaf_l: int,
        slots_r: np.ndarray,
        n_leaf_r: int,
        allowed: Optional[list[np.ndarray]] = None,
    ) -> tuple[float, int, int]:
        """Best (objective, feature, candidate) sending rows left through the
        left structure and right through the right structure, honoring the
        min-leaf constraint inside both structures."""
        best = (np.inf, -1, -1)
        nr = rows.size
        for f in range(self.p):
            cand = self.candidates[f]
            if cand.size == 0:
                continue
            nb = self.n_bins[f]
            b = self.bins[rows, f]
            flat_l = b * n_leaf_l + slots_l
            flat_r = b * n_leaf_r + slots_r
            cnt_l = np.bincount(flat_l, minlength=nb * n_leaf_l).reshape(nb, n_leaf_l)
            cnt_r = np.bincount(flat_r, minlength=nb * n_leaf_r).reshape(nb, n_leaf_r)
            sums_l = np.stack(
                [
                    np.bincount(flat_l, weights=self.gamma[rows, t], minlength=nb * n_leaf_l).reshape(
                        nb, n_leaf_l
                    )
                    for t in range(self.n_t)
                ],
                axis=2,
            )
            sums_r = np.stack(
                [
                    np.bincount(flat_r, weights=self.gamma[rows, t], minlength=nb * n_leaf_r).reshape(
                        nb, n_leaf_r
                    )
                    for t in range(self.n_t)
                ],
                axis=2,
            )
            if self.categorical[f]:
                lev = cand.astype(int)
                left_cnt = cnt_l[lev]
                left_sum = sums_l[lev]
            else:
                left_cnt = np.cumsum(cnt_l, axis=0)[: cand.size]
                left_sum = np.cumsum(sums_l, axis=0)[: cand.size]
            right_cnt = cnt_r.sum(axis=0)[None, :] - (
                cnt_r[lev] if self.categorical[f] else np.cumsum(cnt_r, axis=0)[: cand.size]
            )
            right_sum = sums_r.sum(axis=0)[None, :, :] - (
                sums_r[lev] if self.categorical[f] else np.cumsum(sums_r, axis=0)[: cand.size]
            )
            valid = (left_cnt >= self.min_leaf).all(axis=1) & (right_cnt >= self.min_leaf).all(axis=1)
            if allowed is not None:
                keep = np.zeros(cand.size, dtype=bool)
                keep[allowed[f]] = True
                valid &= keep
            if not valid.any():
                continue
            obj = left_sum.min(axis=2).sum(axis=1) + right_sum.min(axis=2).sum(axis=1)
            obj = np.where(valid, obj, np.inf)
            c = int(np.argmin(obj))
            if obj[c] < best[0]:
                best = (float(obj[c]), f, c)
        return best

    def best_leaf_split(
        self, rows: np.ndarray, allowed: Optional[list[np.ndarray]] = None
    ) -> tuple[float, int, int]:
        zero = np.zeros(rows.size, dtype=np.intp)
        return self.best_partition(rows, zero, 1, zero, 1, allowed=allowed)

    def leaf_objective(self, rows: np.ndarray) -> float:
        return float(self.gamma[rows].sum(axis=0).min())

    def _axis_select(self, f: int, arr: np.ndarray, axis: int) -> np.ndarray:
        """Per-candidate 'rows going left' accumulation along one axis:
        inclusive prefix sums for numeric features, level selection for
        categorical ones."""
        if self.categorical[f]:
            lev = self.candidates[f].astype(int)
            return np.take(arr, lev, axis=axis)
        return np.cumsum(arr, axis=axis).take(np.arange(self.candidates[f].size), axis=axis)

    def best_depth2_subtree(self, rows: np.ndarray, node_depth: int, lam_unit: float):
        """Best depth-<=2 replacement subtree over ``rows``: a root split whose
        children are each either leaves or their own best single split.

        Returns (penalized objective, struct) where struct is None (keep a
        leaf) or (f, c, left_split_or_None, right_split_or_None).  This is the
        escape move for optima the one-block moves cannot leave; at the root
        of a depth-2 problem it is exhaustive.  Evaluated for all candidate
        pairs at once via joint two-feature histograms.
        """
        best_obj = self.leaf_objective(rows)
        best_struct = None
        if node_depth >= self.max_depth or rows.size < 2 * self.min_leaf:
            return best_obj, best_struct
        allow_grandchildren = node_depth + 2 <= self.max_depth
        n_t = self.n_t
        total_sum = self.gamma[rows].sum(axis=0)  # (n_t,)
        n_rows = rows.size

        # per-feature 1-D pieces: S_L[f][c, t] and N_L[f][c]
        sl: list[Optional[np.ndarray]] = [None] * self.p
        nl: list[Optional[np.ndarray]] = [None] * self.p
        for f in range(self.p):
            if self.candidates[f].size == 0:
                continue
            nb = self.n_bins[f]
            b = self.bins[rows, f]
            cnt = np.bincount(b, minlength=nb).astype(float)
            sums = np.stack(
                [np.bincount(b, weights=self.gamma[rows, t], minlength=nb) for t in range(n_t)],
                axis=1,
            )
            nl[f] = self._axis_select(f, cnt, 0)
            sl[f] = self._axis_select(f, sums, 0)

        best_root = (np.inf, -1, -1)
        for f1 in range(self.p):
            k1 = self.candidates[f1].size
            if k1 == 0:
                continue
            n_left = nl[f1]
            n_right = n_rows - n_left
            root_valid = (n_left >= self.min_leaf) & (n_right >= self.min_leaf)
            if not root_valid.any():
                continue
            s_left = sl[f1]  # (k1, t)
            s_right = total_sum[None, :] - s_left
            left_val = s_left.min(axis=1)
            right_val = s_right.min(axis=1)
            if allow_grandchildren:
                b1 = self.bins[rows, f1]
                nb1 = self.n_bins[f1]
                for f2 in range(self.p):
                    k2 = self.candidates[f2].size
                    if k2 == 0:
                        continue
                    nb2 = self.n_bins[f2]
                    flat = b1 * nb2 + self.bins[rows, f2]
                    joint_cnt = np.bincount(flat, minlength=nb1 * nb2).reshape(nb1, nb2).astype(float)
                    joint_sum = np.stack(
                        [
                            np.bincount(flat, weights=self.gamma[rows, t], minlength=nb1 * nb2).reshape(nb1, nb2)
                            for t in range(n_t)
                        ],
                        axis=2,
                    )
                    # inclusive accumulation along both candidate axes
                    n_ll = self._axis_select(f2, self._axis_select(f1, joint_cnt, 0), 1)  # (k1, k2)
                    s_ll = self._axis_select(f2, self._axis_select(f1, joint_sum, 0), 1)  # (k1, k2, t)
                    col_cnt = self._axis_select(f2, joint_cnt.sum(axis=0), 0)  # (k2,)
                    col_sum = self._axis_select(f2, joint_sum.sum(axis=0), 0)  # (k2, t)
                    n_lr = n_left[:, None] - n_ll
                    s_lr = s_left[:, None, :] - s_ll
                    ok = (n_ll >= self.min_leaf) & (n_lr >= self.min_leaf)
                    val = s_ll.min(axis=2) + s_lr.min(axis=2) + lam_unit
                    cand_left = np.where(ok, val, np.inf).min(axis=1)
                    left_val = np.minimum(left_val, cand_left)
                    n_rl = col_cnt[None, :] - n_ll
                    s_rl = col_sum[None, :, :] - s_ll
                    n_rr = n_right[:, None] - n_rl
                    s_rr = s_right[:, None, :] - s_rl
                    ok = (n_rl >= self.min_leaf) & (n_rr >= self.min_leaf)
                    val = s_rl.min(axis=2) + s_rr.min(axis=2) + lam_unit
                    cand_right = np.where(ok, val, np.inf).min(axis=1)
                    right_val = np.minimum(right_val, cand_right)
            combined = np.where(root_valid, left_val + right_val + lam_unit, np.inf)
            c = int(np.argmin(combined))
            if combined[c] < best_root[0]:
                best_root = (float(combined[c]), f1, c)

        if best_root[1] < 0 or best_root[0] >= best_obj:
            return best_obj, best_struct
        obj, f, c = best_root
        # reconstruct the winning child splits (cheap: two single-split scans)
        mask = self.go_left(rows, f, c)
        sides = []
        for side_rows in (rows[mask], rows[~mask]):
            leaf_val = self.leaf_objective(side_rows)
            side = None
            if allow_grandchildren and side_rows.size >= 2 * self.min_leaf:
                sobj, sf, sc = self.best_leaf_split(side_rows)
                if sf >= 0 and sobj + lam_unit < leaf_val:
                    side = (sf, sc)
            sides.append(side)
        return obj, (f, c, sides[0], sides[1])


_EPS_SCALE = 1e-9


def _apply_depth2_struct(work: _Work, v: int, struct) -> None:
    """Overwrite the subtree at v with a depth-<=2 struct from best_depth2_subtree."""
    f, c, ls, rs = struct
    work.feature[v] = f
    work.cand[v] = c
    work.left[v] = work.new_node(v)
    work.right[v] = work.new_node(v)
    for child, side in ((work.left[v], ls), (work.right[v], rs)):
        if side is not None:
            sf, sc = side
            work.feature[child] = sf
            work.cand[child] = sc
            work.left[child] = work.new_node(child)
            work.right[child] = work.new_node(child)


def _coordinate_descent(search: _Search, work: _Work, lam_unit: float, rng: np.random.Generator) -> None:
    """Node-wise local search to a fixpoint.

    Regular passes apply the cheap one-block moves (split a leaf, collapse a
    subtree, replace a split with the child subtrees fixed).  Once a pass
    makes no progress, one escape sweep offers each node its best depth-<=2
    replacement subtree, which can cross the root/children coupling that traps
    the one-block moves; any success resumes regular passes.
    """
    eps = _EPS_SCALE * max(lam_unit, np.abs(search.gamma).mean(), 1e-300) * max(search.n, 1)
    for _ in range(500):
        improved = False
        live = set(work.live_nodes())
        order = rng.permutation(sorted(live))
        for v in order:
            v = int(v)
            if v not in live:  # detached by an earlier prune this pass
                continue
            rows = search.membership(work, v)
            if rows.size == 0:
                continue
            if work.is_leaf(v):
                if work.depth(v) >= search.max_depth or rows.size < 2 * search.min_leaf:
                    continue
                cur = search.leaf_objective(rows)
                obj, f, c = search.best_leaf_split(rows)
                if f >= 0 and obj + lam_unit < cur - eps:
                    work.feature[v] = f
                    work.cand[v] = c
                    work.left[v] = work.new_node(v)
                    work.right[v] = work.new_node(v)
                    improved = True
                continue
            internals = work.subtree_internal_count(v)
            cur = search.subtree_objective(work, v, rows) + lam_unit * internals
            best_obj = search.leaf_objective(rows)
            best_move = ("prune",)
            slots_l, leaves_l = search.route_slots(work, rows, work.left[v])
            slots_r, leaves_r = search.route_slots(work, rows, work.right[v])
            obj, f, c = search.best_partition(rows, slots_l, len(leaves_l), slots_r, len(leaves_r))
            if f >= 0 and obj + lam_unit * internals < best_obj:
                best_obj = obj + lam_unit * internals
                best_move = ("replace", f, c)
            if best_obj < cur - eps:
                if best_move[0] == "prune":
                    work.feature[v] = -1
                    work.cand[v] = -1
                    work.left[v] = -1
                    work.right[v] = -1
                    live = set(work.live_nodes())
                else:
                    work.feature[v] = best_move[1]
                    work.cand[v] = best_move[2]
                improved = True
        if improved:
            continue
        escaped = False
        for v in rng.permutation(sorted(set(work.live_nodes()))):
            v = int(v)
            if v not in set(work.live_nodes()):
                continue
            rows = search.membership(work, v)
            if rows.size == 0:
                continue
            if work.is_leaf(v):
                cur = search.leaf_objective(rows)
            else:
                cur = search.subtree_objective(work, v, rows) + lam_unit * work.subtree_internal_count(v)
            obj, struct = search.best_depth2_subtree(rows, work.depth(v), lam_unit)
            if struct is not None and obj < cur - eps:
                _apply_depth2_struct(work, v, struct)
                escaped = True
                break
        if not escaped:
            return


def _greedy_init(search: _Search, work: _Work, lam_unit: float, rng: np.random.Generator) -> None:
    """Best-first growth considering a random half of each feature's candidates."""

    def sample_allowed() -> list[np.ndarray]:
        allowed = []
        for f in range(search.p):
            k = search.candidates[f].size
            if k == 0:
                allowed.append(np.empty(0, dtype=int))
                continue
            keep = np.nonzero(rng.random(k) < 0.5)[0]
            if keep.size == 0:
                keep = np.array([rng.integers(k)])
            allowed.append(keep)
        return allowed

    frontier: dict[int, tuple[float, float, int, int]] = {}

    def consider(leaf: int):
        rows = search.membership(work, leaf)
        if work.depth(leaf) >= search.max_depth or rows.size < 2 * search.min_leaf:
            return
        cur = search.leaf_objective(rows)
        obj, f, c = search.best_leaf_split(rows, allowed=sample_allowed())
        if f >= 0:
            delta = obj + lam_unit - cur
            if delta < 0:
                frontier[leaf] = (delta, obj, f, c)

    consider(0)
    while frontier:
        leaf = min(frontier, key=lambda k: frontier[k][0])
        _, _, f, c = frontier.pop(leaf)
        work.feature[leaf] = f
        work.cand[leaf] = c
        work.left[leaf] = work.new_node(leaf)
        work.right[leaf] = work.new_node(leaf)
        consider(work.left[leaf])
        consider(work.right[leaf])


# ---------------------------------------------------------------------------
# tree construction from a finished search


def _split_value(search: _Search, f: int, c: int, schema: FeatureSchema):
    if search.categorical[f]:
        level = search._cat_level(f, c)
        return None, (schema[f].levels[level],)
    return float(search.candidates[f][c]), None


def _build_tree(
    search: _Search,
    work: _Work,
    train: Cohort,
    reward: RewardMatrix,
    outcome: Optional[OutcomePredictions],
) -> PolicyTree:
    """Freeze the work tree: BFS ids, full-train leaf prescriptions and stats."""
    schema = train.schema
    order = []
    queue = [0]
    while queue:
        v = queue.pop(0)
        order.append(v)
        if not work.is_leaf(v):
            queue.append(work.left[v])
            queue.append(work.right[v])
    bfs_id = {v: k + 1 for k, v in enumerate(order)}

    y = train.outcomes
    t_idx = train.treatment_idx
    estimates = outcome.values if outcome is not None else reward.values
    n_t = len(train.treatments)

    nodes = []
    for v in order:
        if not work.is_leaf(v):
            thr, levels = _split_value(search, work.feature[v], work.cand[v], schema)
            nodes.append(
                Node(
                    id=bfs_id[v],
                    feature=work.feature[v],
                    threshold=thr,
                    levels=levels,
                    left=bfs_id[work.left[v]],
                    right=bfs_id[work.right[v]],
                )
            )
            continue
        rows = search.membership(work, v)
        sums = search.gamma[rows].sum(axis=0)
        prescription = int(np.argmin(sums))
        counts, rates, means = [], [], []
        for t in range(n_t):
            got = rows[t_idx[rows] == t]
            counts.append(int(got.size))
            rates.append(float(y[got].mean()) if got.size else None)
            means.append(float(estimates[rows, t].mean()) if rows.size else None)
        nodes.append(
            Node(
                id=bfs_id[v],
                prescription=prescription,
                n_train=int(rows.size),
                stats=LeafStats(tuple(counts), tuple(rates), tuple(means)),
            )
        )
    nodes.sort(key=lambda n: n.id)

    X = train.feature_matrix
    bounds = tuple(
        (float(np.nanmin(X[:, j])), float(np.nanmax(X[:, j])))
        if schema[j].kind != CATEGORICAL
        else None
        for j in range(len(schema))
    )
    return PolicyTree(schema, train.treatments, tuple(nodes), root=1, bounds=bounds)


def _validate_inputs(train: Cohort, reward: RewardMatrix) -> None:
    if reward.values.shape[0] != train.n:
        raise PolicyError("reward rows do not align with the cohort")
    if reward.treatments.treatments != train.treatments.treatments:
        raise PolicyError("reward treatment order does not match the cohort")
    if np.isnan(train.feature_matrix).any():
        raise PolicyError("cohort has missing values; impute before fitting")


def fit_policy_tree(
    train: Cohort,
    reward: RewardMatrix,
    config: OptConfig,
    outcome: Optional[OutcomePredictions] = None,
) -> PolicyTree:
    """Learn a prescription tree by penalized coordinate descent.

    When the complexity grid has more than one entry, a validation fraction of
    the train rows is withheld, the search runs on the remainder for every
    (lambda, restart), and the lambda whose best tree scores lowest on the
    withheld rows wins.  A singleton grid has nothing to tune, so the search
    sees every row.  Leaf prescriptions and stats are always refit on the full
    train set at the end; ``outcome`` supplies the per-leaf mean estimates
    (falling back to the reward matrix).
    """
    _validate_inputs(train, reward)
    n = train.n
    gamma = reward.values
    cat = train.schema.categorical_mask

    if n < config.min_samples_leaf:
        warnings.warn(
            f"cohort of {n} rows is smaller than min_samples_leaf={config.min_samples_leaf}; "
            "returning a depth-0 tree",
            stacklevel=2,
        )
    search = _Search(
        train.feature_matrix, gamma, cat, config.max_depth, config.min_samples_leaf,
        config.n_candidate_thresholds,
    )

    grid = tuple(config.complexity_grid)
    n_val = int(round(config.validation_fraction * n)) if len(grid) > 1 else 0
    n_val = min(n_val, n - 1)
    if n_val > 0:
        rng_val = make_rng(config.seed, 98217)
        val_rows = np.sort(rng_val.choice(n, size=n_val, replace=False))
        fit_mask = np.ones(n, dtype=bool)
        fit_mask[val_rows] = False
        fit_rows = np.nonzero(fit_mask)[0]
    else:
        val_rows = np.arange(n)
        fit_rows = np.arange(n)

    # candidate thresholds come from the full train set so the final tree is
    # expressed over the same split vocabulary regardless of the holdout
    fit_search = _Search(
        train.feature_matrix[fit_rows], gamma[fit_rows], cat, config.max_depth,
        config.min_samples_leaf, config.n_candidate_thresholds,
        binning=(search.candidates, search.bins[fit_rows], search.n_bins),
    )

    unit = float(np.abs(gamma[fit_rows]).mean())

    best_overall: Optional[tuple[float, _Work]] = None
    for li, lam in enumerate(grid):
        lam_unit = lam * unit
        best_for_lam: Optional[tuple[float, _Work]] = None
        for r in range(config.n_restarts):
            rng = make_rng(config.seed, li, r)
            work = _Work()
            _greedy_init(fit_search, work, lam_unit, rng)
            _coordinate_descent(fit_search, work, lam_unit, rng)
            slots, leaves = fit_search.route_slots(work, np.arange(fit_rows.size), 0)
            pen_obj = fit_search.leaf_contribution(
                np.arange(fit_rows.size), slots, len(leaves)
            ) + lam_unit * work.subtree_internal_count(0)
            if best_for_lam is None or pen_obj < best_for_lam[0] - 1e-12:
                best_for_lam = (pen_obj, work)
        # score this lambda's tree on the withheld rows (unpenalized)
        work = best_for_lam[1]
        val_obj = _holdout_objective(search, fit_search, work, fit_rows, val_rows)
        if best_overall is None or val_obj < best_overall[0] - 1e-12:
            best_overall = (val_obj, work)

    return _build_tree(search, best_overall[1], train, reward, outcome)


def _holdout_objective(
    search: _Search, fit_search: _Search, work: _Work, fit_rows: np.ndarray, val_rows: np.ndarray
) -> float:
    """Validation policy objective with leaf prescriptions taken from the fit rows."""
    slots_fit, leaves = fit_search.route_slots(work, np.arange(fit_rows.size), 0)
    n_leaves = len(leaves)
    sums = np.stack(
        [
            np.bincount(slots_fit, weights=fit_search.gamma[np.arange(fit_rows.size), t], minlength=n_leaves)
            for t in range(fit_search.n_t)
        ],
        axis=1,
    )
    arm_of_slot = sums.argmin(axis=1)
    slots_val, _ = search.route_slots(work, val_rows, 0)
    return float(search.gamma[val_rows, arm_of_slot[slots_val]].sum())


def exhaustive_policy_search(
    train: Cohort,
    reward: RewardMatrix,
    max_depth: int,
    min_samples_leaf: int = 1,
    n_candidate_thresholds: int = 32,
    outcome: Optional[OutcomePredictions] = None,
) -> PolicyTree:
    """Globally optimal tree by enumeration over the same candidate set.

    Testing oracle for the coordinate-descent fitter; refuses instances beyond
    n=500 rows, 8 features, or depth 2.
    """
    _validate_inputs(train, reward)
    n = train.n
    if n > 500 or len(train.schema) > 8 or max_depth > 2:
        raise PolicyError("exhaustive search is limited to n<=500, p<=8, max_depth<=2")
    search = _Search(
        train.feature_matrix, reward.values, train.schema.categorical_mask,
        max_depth, min_samples_leaf, n_candidate_thresholds,
    )
    eps = _EPS_SCALE * max(np.abs(reward.values).mean(), 1e-300) * max(n, 1)

    def leaf_mask(rows: np.ndarray, f: int, c: int) -> np.ndarray:
        b = search.bins[rows, f]
        if search.categorical[f]:
            return b == search._cat_level(f, c)
        return b <= c

    def best(rows: np.ndarray, depth_left: int):
        obj = search.leaf_objective(rows)
        struct = ("leaf",)
        if depth_left == 0 or rows.size < 2 * min_samples_leaf:
            return obj, struct
        if depth_left == 1:
            split_obj, f, c = search.best_leaf_split(rows)
            if f >= 0 and split_obj < obj - eps:
                return split_obj, ("split", f, c, ("leaf",), ("leaf",))
            return obj, struct
        for f in range(search.p):
            for c in range(search.candidates[f].size):
                mask = leaf_mask(rows, f, c)
                left_rows = rows[mask]
                right_rows = rows[~mask]
                if left_rows.size < min_samples_leaf or right_rows.size < min_samples_leaf:
                    continue
                lo, ls = best(left_rows, depth_left - 1)
                ro, rs = best(right_rows, depth_left - 1)
                if lo + ro < obj - eps:
                    obj = lo + ro
                    struct = ("split", f, c, ls, rs)
        return obj, struct

    _, struct = best(np.arange(n), max_depth)
    work = _Work()

    def materialize(node: int, s) -> None:
        if s[0] == "leaf":
            return
        _, f, c, ls, rs = s
        work.feature[node] = f
        work.cand[node] = c
        work.left[node] = work.new_node(node)
        work.right[node] = work.new_node(node)
        materialize(work.left[node], ls)
        materialize(work.right[node], rs)

    materialize(0, struct)
    return _build_tree(search, work, train, reward, outcome)


# ---------------------------------------------------------------------------
# serialization


def export_tree(tree: PolicyTree) -> dict:
    """Versioned JSON document; lists only the features the tree splits on."""
    used = tree.used_features
    schema_docs = []
    for j in used:
        f = tree.schema[j]
        entry: dict = {"name": f.name, "kind": f.kind}
        if f.kind == CATEGORICAL:
            entry["levels"] = list(f.levels)
        if f.unit is not None:
            entry["unit"] = f.unit
        if tree.bounds is not None and tree.bounds[j] is not None:
            entry["min"] = tree.bounds[j][0]
            entry["max"] = tree.bounds[j][1]
        schema_docs.append(entry)

    nodes_docs = []
    for node in tree.nodes:
        if node.is_leaf:
            stats = None
            if node.stats is not None:
                stats = {
                    t: {
                        "count": node.stats.counts[k],
                        "historical_rate": node.stats.historical_rates[k],
                        "mean_estimate": node.stats.mean_estimates[k],
                    }
                    for k, t in enumerate(tree.treatments.treatments)
                }
            doc = {
                "id": node.id,
                "kind": "leaf",
                "prescription": tree.treatments.treatments[node.prescription],
                "n_train": node.n_train,
            }
            if stats is not None:
                doc["stats"] = stats
            nodes_docs.append(doc)
        else:
            doc = {
                "id": node.id,
                "kind": "split",
                "feature": tree.schema[node.feature].name,
            }
            if node.levels is not None:
                doc["levels"] = list(node.levels)
            else:
                doc["threshold"] = node.threshold
            doc["left"] = node.left
            doc["right"] = node.right
            nodes_docs.append(doc)

    return {
        "version": TREE_FORMAT_VERSION,
        "schema": schema_docs,
        "treatments": list(tree.treatments.treatments),
        "root": tree.root,
        "nodes": nodes_docs,
    }


def tree_to_json(tree: PolicyTree) -> str:
    return json.dumps(export_tree(tree), indent=2) + "\n"


def import_tree(doc: Union[dict, str]) -> PolicyTree:
    """Parse and validate an exported document back into a PolicyTree."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise TreeImportError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise TreeImportError("tree document must be a JSON object")
    if doc.get("version") != TREE_FORMAT_VERSION:
        raise TreeImportError(
            f"unsupported format version {doc.get('version')!r}; expected {TREE_FORMAT_VERSION}"
        )
    try:
        features = tuple(
            Feature(
                name=f["name"],
                kind=f["kind"],
                levels=tuple(f.get("levels", ())),
                unit=f.get("unit"),
            )
            for f in doc["schema"]
        )
        schema = FeatureSchema(features)
        treatments = TreatmentSet(tuple(doc["treatments"]))
        node_docs = doc["nodes"]
        root = doc["root"]
    except (KeyError, TypeError) as e:
        raise TreeImportError(f"malformed tree document: {e}") from None

    bounds = tuple(
        (float(f["min"]), float(f["max"])) if "min" in f and "max" in f else None
        for f in doc["schema"]
    )
    name_to_idx = {f.name: j for j, f in enumerate(features)}
    ids = set()
    nodes = []
    for nd in node_docs:
        try:
            nid = int(nd["id"])
            kind = nd["kind"]
        except (KeyError, TypeError) as e:
            raise TreeImportError(f"malformed node: {e}") from None
        if nid in ids:
            raise TreeImportError(f"duplicate node id {nid}")
        ids.add(nid)
        if kind == "leaf":
            presc = nd.get("prescription")
            if presc not in treatments.treatments:
                raise TreeImportError(f"node {nid}: unknown prescription {presc!r}")
            stats = None
            if "stats" in nd:
                counts, rates, means = [], [], []
                for t in treatments.treatments:
                    cell = nd["stats"].get(t, {})
                    counts.append(int(cell.get("count", 0)))
                    rates.append(cell.get("historical_rate"))
                    means.append(cell.get("mean_estimate"))
                stats = LeafStats(tuple(counts), tuple(rates), tuple(means))
            nodes.append(
                Node(
                    id=nid,
                    prescription=treatments.index(presc),
                    n_train=int(nd.get("n_train", 0)),
                    stats=stats,
                )
            )
        elif kind == "split":
            fname = nd.get("feature")
            if fname not in name_to_idx:
                raise TreeImportError(f"node {nid}: unknown feature {fname!r}")
            j = name_to_idx[fname]
            levels = None
            threshold = None
            if "levels" in nd:
                levels = tuple(nd["levels"])
                unknown = [lv for lv in levels if lv not in features[j].levels]
                if unknown:
                    raise TreeImportError(f"node {nid}: unknown levels {unknown} for {fname!r}")
            elif "threshold" in nd:
                threshold = float(nd["threshold"])
            else:
                raise TreeImportError(f"node {nid}: split needs a threshold or levels")
            if "left" not in nd or "right" not in nd:
                raise TreeImportError(f"node {nid}: split needs left and right children")
            nodes.append(
                Node(
                    id=nid,
                    feature=j,
                    threshold=threshold,
                    levels=levels,
                    left=int(nd["left"]),
                    right=int(nd["right"]),
                )
            )
        else:
            raise TreeImportError(f"node {nid}: unknown kind {kind!r}")

    for node in nodes:
        if not node.is_leaf:
            for child in (node.left, node.right):
                if child not in ids:
                    raise TreeImportError(f"node {node.id}: dangling child id {child}")
    if root not in ids:
        raise TreeImportError(f"dangling root id {root}")
    return PolicyTree(schema, treatments, tuple(nodes), root=int(root), bounds=bounds)
