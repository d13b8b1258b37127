"""Doubly robust reward matrices from observational cohorts.

The reward matrix combines per-treatment outcome estimates with inverse
propensity weighting::

    reward[i, t] = yhat[i, t] + 1{T_i = t} * (y_i - yhat[i, t]) / p[i, t]

Estimates are consistent when either the outcome models or the propensity
model is correct.  Train and test matrices are fit independently on their own
cohorts; nothing here peeks across a split.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Cohort, TreatmentSet
from . import learners
from .learners import EnsembleConfig, ProbabilisticClassifier, TreeLearnerConfig


class CounterfactualError(ValueError):
    pass


def default_grid(seed: int = 0) -> tuple[EnsembleConfig, ...]:
    """Boosted-tree grid searched by AUC: depth {2,3} x trees {50,100} x lr {0.1,0.3}."""
    return tuple(
        EnsembleConfig(
            kind="boosted",
            n_estimators=n,
            learning_rate=lr,
            base=TreeLearnerConfig(max_depth=d, min_samples_leaf=5),
            seed=seed,
        )
        for d in (2, 3)
        for n in (50, 100)
        for lr in (0.1, 0.3)
    )


@dataclass(frozen=True)
class CounterfactualConfig:
    outcome_mode: str = "per_treatment"  # or "single_with_treatment_feature"
    clip_floor: float = 0.05
    outcome_grid: tuple[EnsembleConfig, ...] = ()
    propensity_grid: tuple[EnsembleConfig, ...] = ()
    cv_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.outcome_mode not in ("per_treatment", "single_with_treatment_feature"):
            raise CounterfactualError(f"unknown outcome_mode {self.outcome_mode!r}")
        if not 0.0 < self.clip_floor < 0.5:
            raise CounterfactualError("clip_floor must lie in (0, 0.5)")
        if not self.outcome_grid:
            object.__setattr__(self, "outcome_grid", default_grid(self.seed))
        if not self.propensity_grid:
            object.__setattr__(self, "propensity_grid", default_grid(self.seed))


@dataclass(frozen=True)
class OutcomePredictions:
    """n x n_t matrix of estimated outcome probabilities, one column per treatment."""

    values: np.ndarray
    treatments: TreatmentSet
    models: tuple[ProbabilisticClassifier, ...] = ()
    configs: tuple[EnsembleConfig, ...] = ()

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[1] != len(self.treatments):
            raise CounterfactualError("prediction matrix shape does not match the treatment set")
        if np.isnan(v).any() or (v < 0).any() or (v > 1).any():
            raise CounterfactualError("outcome predictions must lie in [0, 1]")


@dataclass(frozen=True)
class PropensityEstimates:
    """n x n_t matrix of treatment-assignment probabilities.

    Stored values are post-clipping: every entry sits in [clip_floor, 1].
    Rows sum to 1 before clipping; ``fit_propensity`` renormalizes so they
    still do afterwards, but that is its contract, not this type's.
    """

    values: np.ndarray
    clip_floor: float
    model: Optional[ProbabilisticClassifier] = None
    config: Optional[EnsembleConfig] = None

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise CounterfactualError("propensity matrix must be 2-d")
        if (v < self.clip_floor - 1e-12).any():
            raise CounterfactualError("propensities below the clip floor")
        if (v > 1.0 + 1e-12).any() or not np.isfinite(v).all():
            raise CounterfactualError("propensities must lie in [clip_floor, 1]")


@dataclass(frozen=True)
class RewardMatrix:
    values: np.ndarray
    treatments: TreatmentSet
    provenance: str = "doubly_robust"  # or "oracle"

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.treatments):
            raise CounterfactualError("reward matrix shape does not match the treatment set")
        if not np.isfinite(self.values).all():
            raise CounterfactualError("reward entries must be finite")
        if self.provenance not in ("doubly_robust", "oracle"):
            raise CounterfactualError(f"unknown provenance {self.provenance!r}")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])


def _require_complete(cohort: Cohort) -> np.ndarray:
    X = cohort.feature_matrix
    if np.isnan(X).any():
        raise CounterfactualError("cohort has missing values; impute before estimation")
    return X


def _select_and_fit(
    X: np.ndarray,
    y: np.ndarray,
    grid: Sequence[EnsembleConfig],
    cv_folds: int,
    seed: int,
    categorical: np.ndarray,
) -> tuple[ProbabilisticClassifier, EnsembleConfig]:
    grid = tuple(replace(cfg, seed=seed) for cfg in grid)
    single_class = y.min() == y.max()
    if len(grid) == 1 or single_class or y.shape[0] < max(2, cv_folds):
        cfg = grid[0]
    else:
        cfg = learners.cross_validated_select(X, y, grid, k=cv_folds, seed=seed, categorical=categorical)
    return learners.fit_classifier(X, y, cfg, categorical=categorical), cfg


def fit_outcome_estimators(cohort: Cohort, config: CounterfactualConfig) -> OutcomePredictions:
    """Estimate the outcome probability of every record under every treatment.

    per_treatment mode fits one model per arm on that arm's recipients and
    applies it to the whole cohort; single mode fits one model on all rows
    with the treatment appended as a categorical feature.
    """
    X = _require_complete(cohort)
    y = cohort.outcomes
    t_idx = cohort.treatment_idx
    n_t = len(cohort.treatments)
    cat = cohort.schema.categorical_mask
    n = cohort.n

    values = np.zeros((n, n_t))
    models = []
    configs = []
    if config.outcome_mode == "per_treatment":
        for t, name in enumerate(cohort.treatments.treatments):
            rows = t_idx == t
            if not rows.any():
                raise CounterfactualError(f"no records received treatment {name!r}")
            if rows.sum() < 2:
                raise CounterfactualError(
                    f"treatment arm {name!r} has only {int(rows.sum())} record(s); need at least 2"
                )
            model, cfg = _select_and_fit(
                X[rows], y[rows], config.outcome_grid, config.cv_folds,
                seed=config.seed * 100 + 11 + t, categorical=cat,
            )
            values[:, t] = model.predict_proba_matrix(X)
            models.append(model)
            configs.append(cfg)
    else:
        Xa = np.column_stack([X, t_idx.astype(float)])
        cat_a = np.append(cat, True)
        model, cfg = _select_and_fit(
            Xa, y, config.outcome_grid, config.cv_folds,
            seed=config.seed * 100 + 11, categorical=cat_a,
        )
        for t in range(n_t):
            Xq = Xa.copy()
            Xq[:, -1] = float(t)
            values[:, t] = model.predict_proba_matrix(Xq)
        models.append(model)
        configs.append(cfg)
    return OutcomePredictions(values, cohort.treatments, tuple(models), tuple(configs))


def _floor_rows(P: np.ndarray, floor: float) -> np.ndarray:
    """Raise sub-floor entries to the floor, paying for it proportionally out
    of the excess above the floor; rows keep summing to 1."""
    out = P.copy()
    below = out < floor
    if not below.any():
        return out
    for i in np.nonzero(below.any(axis=1))[0]:
        row = out[i]
        deficit = np.maximum(floor - row, 0.0).sum()
        excess = np.maximum(row - floor, 0.0)
        total_excess = excess.sum()
        if total_excess <= 0:
            out[i] = 1.0 / row.size
            continue
        out[i] = np.maximum(row, floor) - excess * (deficit / total_excess)
    return out


def fit_propensity(cohort: Cohort, config: CounterfactualConfig) -> PropensityEstimates:
    """Estimate treatment-assignment probabilities, clipped to the floor."""
    X = _require_complete(cohort)
    t_idx = cohort.treatment_idx
    n_t = len(cohort.treatments)
    cat = cohort.schema.categorical_mask
    present = np.unique(t_idx)
    if present.size < 2:
        raise CounterfactualError("propensity estimation needs at least two treatments present")

    if n_t == 2:
        label = (t_idx == 1).astype(float)
        model, cfg = _select_and_fit(
            X, label, config.propensity_grid, config.cv_folds,
            seed=config.seed * 100 + 7, categorical=cat,
        )
        p1 = model.predict_proba_matrix(X)
        P = np.column_stack([1.0 - p1, p1])
    else:
        cols = []
        model = None
        cfg = None
        for t in range(n_t):
            m, c = _select_and_fit(
                X, (t_idx == t).astype(float), config.propensity_grid, config.cv_folds,
                seed=config.seed * 100 + 7 + t, categorical=cat,
            )
            cols.append(m.predict_proba_matrix(X))
        P = np.column_stack(cols)
        P = P / P.sum(axis=1, keepdims=True)
    P = _floor_rows(P, config.clip_floor)
    return PropensityEstimates(P, config.clip_floor, model, cfg)


def doubly_robust(
    cohort: Cohort, yhat: OutcomePredictions, prop: PropensityEstimates
) -> RewardMatrix:
    """Apply the doubly robust correction exactly as stated in the module doc."""
    n = cohort.n
    if yhat.values.shape != (n, len(cohort.treatments)) or prop.values.shape != yhat.values.shape:
        raise CounterfactualError("cohort, predictions, and propensities disagree on dimensions")
    gamma = yhat.values.copy()
    rows = np.arange(n)
    t = cohort.treatment_idx
    gamma[rows, t] = gamma[rows, t] + (1.0 / prop.values[rows, t]) * (cohort.outcomes - gamma[rows, t])
    return RewardMatrix(gamma, cohort.treatments, provenance="doubly_robust")


@dataclass(frozen=True)
class RewardFit:
    """One cohort's fitted estimation bundle with quality diagnostics."""

    reward: RewardMatrix
    outcome: OutcomePredictions
    propensity: PropensityEstimates
    outcome_aucs: tuple[Optional[float], ...]  # per arm, on its own recipients
    propensity_auc: Optional[float]


def fit_reward(cohort: Cohort, config: CounterfactualConfig) -> RewardFit:
    """Convenience: outcome estimators + propensity + doubly robust matrix."""
    outcome = fit_outcome_estimators(cohort, config)
    propensity = fit_propensity(cohort, config)
    reward = doubly_robust(cohort, outcome, propensity)

    t_idx = cohort.treatment_idx
    y = cohort.outcomes
    aucs = []
    for t in range(len(cohort.treatments)):
        rows = t_idx == t
        if rows.any() and y[rows].min() != y[rows].max():
            aucs.append(learners.auc_roc(y[rows], outcome.values[rows, t]))
        else:
            aucs.append(None)
    if len(cohort.treatments) == 2 and np.unique(t_idx).size == 2:
        p_auc = learners.auc_roc((t_idx == 1).astype(float), propensity.values[:, 1])
    else:
        p_auc = None
    return RewardFit(reward, outcome, propensity, tuple(aucs), p_auc)


@dataclass(frozen=True)
class LeafReconciliationRow:
    leaf_id: int
    treatment: str
    n_members: int
    estimated_rate: float
    n_recipients: int
    historical_rate: Optional[float]


def leaf_rate_reconciliation(
    estimates: Union[OutcomePredictions, RewardMatrix],
    tree,
    cohort: Cohort,
) -> tuple[LeafReconciliationRow, ...]:
    """Per leaf and treatment: mean estimate over members vs. the empirical
    outcome rate among members who actually received the treatment."""
    from . import policy

    leaf_ids = policy.route_cohort(tree, cohort)
    values = estimates.values
    y = cohort.outcomes
    t_idx = cohort.treatment_idx
    rows = []
    for leaf in sorted(set(leaf_ids.tolist())):
        members = leaf_ids == leaf
        for t, name in enumerate(cohort.treatments.treatments):
            got = members & (t_idx == t)
            rows.append(
                LeafReconciliationRow(
                    leaf_id=int(leaf),
                    treatment=name,
                    n_members=int(members.sum()),
                    estimated_rate=float(values[members, t].mean()),
                    n_recipients=int(got.sum()),
                    historical_rate=float(y[got].mean()) if got.any() else None,
                )
            )
    return tuple(rows)


def save_reward(reward: RewardMatrix, ids: Sequence[str], path: Union[str, Path]) -> None:
    """Reward CSV: id column plus one column per treatment, in treatment order."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *reward.treatments.treatments])
        for i, rid in enumerate(ids):
            writer.writerow([rid, *[repr(float(v)) for v in reward.values[i]]])


def load_reward(path: Union[str, Path], treatments: TreatmentSet, ids: Sequence[str]) -> RewardMatrix:
    """Read a reward CSV back, checking id alignment with the cohort."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["id", *treatments.treatments]:
            raise CounterfactualError(f"{path}: header does not match the treatment set")
        rows = list(reader)
    if [r[0] for r in rows] != list(ids):
        raise CounterfactualError(f"{path}: id column does not align with the cohort")
    values = np.array([[float(c) for c in r[1:]] for r in rows])
    return RewardMatrix(values, treatments, provenance="doubly_robust")
