"""Cohort representation, CSV ingestion, imputation, and train/test splitting.

A cohort is an immutable table of patient records tied to a feature schema and
an ordered treatment set.  The treatment order is load-bearing: it defines the
column order of every downstream matrix (outcome predictions, propensities,
rewards).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

NUMERIC = "numeric"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (NUMERIC, BINARY, CATEGORICAL)

Value = Union[float, str, None]


def make_rng(*parts: int) -> np.random.Generator:
    """Deterministic generator from any mix of (possibly negative) integers."""
    return np.random.default_rng([int(p) % (2**32) for p in parts])


class CohortError(ValueError):
    """Base error for cohort construction and processing."""


class LoadError(CohortError):
    """Raised when a cohort CSV or config cannot be parsed."""


class ImputationError(CohortError):
    """Raised when imputation statistics cannot be computed."""


@dataclass(frozen=True)
class Feature:
    """One column of the schema.

    ``levels`` is required for categorical features and ignored otherwise.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    unit: Optional[str] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise CohortError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        if self.kind == CATEGORICAL:
            if not self.levels:
                raise CohortError(f"categorical feature {self.name!r} has no levels")
            if len(set(self.levels)) != len(self.levels):
                raise CohortError(f"duplicate levels in feature {self.name!r}")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature declarations; order defines column order everywhere."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise CohortError("feature names must be unique")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Feature:
        return self.features[i]

    def index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise KeyError(name)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([f.kind == CATEGORICAL for f in self.features], dtype=bool)


@dataclass(frozen=True)
class TreatmentSet:
    """Ordered treatment names; the order is fixed and persisted."""

    treatments: tuple[str, ...]

    def __post_init__(self):
        if len(self.treatments) < 2:
            raise CohortError("a treatment set needs at least two treatments")
        if len(set(self.treatments)) != len(self.treatments):
            raise CohortError("treatment names must be unique")

    def __len__(self) -> int:
        return len(self.treatments)

    def __iter__(self):
        return iter(self.treatments)

    def index(self, name: str) -> int:
        try:
            return self.treatments.index(name)
        except ValueError:
            raise KeyError(name) from None


@dataclass(frozen=True)
class PatientRecord:
    """One observation: feature values (missing allowed), treatment, outcome."""

    id: str
    features: tuple[Value, ...]
    treatment: str
    outcome: int


@dataclass(frozen=True)
class SplitSpec:
    """Reproducible partition spec: train size is round(n * train_fraction)."""

    train_fraction: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise CohortError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Cohort:
    schema: FeatureSchema
    treatments: TreatmentSet
    records: tuple[PatientRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise CohortError("a cohort needs at least one record")
        p = len(self.schema)
        for r in self.records:
            if len(r.features) != p:
                raise CohortError(f"record {r.id!r} has {len(r.features)} values, schema has {p}")
            if r.outcome not in (0, 1):
                raise CohortError(f"record {r.id!r} has non-binary outcome {r.outcome!r}")
            if r.treatment not in self.treatments.treatments:
                raise CohortError(f"record {r.id!r} has unknown treatment {r.treatment!r}")

    @property
    def n(self) -> int:
        return len(self.records)

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        """n x p float matrix; categorical cells become level indices, missing -> nan."""
        p = len(self.schema)
        X = np.full((self.n, p), np.nan, dtype=float)
        level_maps = [
            {lv: float(i) for i, lv in enumerate(f.levels)} if f.kind == CATEGORICAL else None
            for f in self.schema.features
        ]
        for i, r in enumerate(self.records):
            for j, v in enumerate(r.features):
                if v is None:
                    continue
                lm = level_maps[j]
                X[i, j] = lm[v] if lm is not None else float(v)
        return X

    @cached_property
    def treatment_idx(self) -> np.ndarray:
        lookup = {t: i for i, t in enumerate(self.treatments.treatments)}
        return np.array([lookup[r.treatment] for r in self.records], dtype=np.intp)

    @cached_property
    def outcomes(self) -> np.ndarray:
        return np.array([r.outcome for r in self.records], dtype=float)

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.feature_matrix).any())

    def subset(self, indices: Sequence[int]) -> "Cohort":
        return Cohort(self.schema, self.treatments, tuple(self.records[i] for i in indices))


def _parse_cell(raw: str, feature: Feature, where: str) -> Value:
    if raw == "":
        return None
    if feature.kind == CATEGORICAL:
        if raw not in feature.levels:
            raise LoadError(f"{where}: {raw!r} is not a level of {feature.name!r}")
        return raw
    try:
        v = float(raw)
    except ValueError:
        raise LoadError(f"{where}: cannot parse {raw!r} as a number for {feature.name!r}") from None
    if feature.kind == BINARY and v not in (0.0, 1.0):
        raise LoadError(f"{where}: binary feature {feature.name!r} must be 0 or 1, got {raw!r}")
    return v


def load_cohort(path: Union[str, Path], schema: FeatureSchema, treatments: TreatmentSet) -> Cohort:
    """Read a cohort CSV: ``id`` column first, features in schema order,
    ``treatment`` and ``outcome`` last.  Empty cells are missing values.
    """
    path = Path(path)
    expected = ["id", *schema.names, "treatment", "outcome"]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        if header != expected:
            unknown = [c for c in header if c not in expected]
            if unknown:
                raise LoadError(f"{path}: unknown column(s) {unknown}")
            raise LoadError(f"{path}: header {header} does not match expected {expected}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise LoadError(f"{path} line {lineno}: expected {len(expected)} cells, got {len(row)}")
            rid = row[0]
            values = tuple(
                _parse_cell(row[1 + j], schema[j], f"{path} line {lineno}, column {schema[j].name!r}")
                for j in range(len(schema))
            )
            treatment = row[-2]
            if treatment not in treatments.treatments:
                raise LoadError(f"{path} line {lineno}, column 'treatment': unknown treatment {treatment!r}")
            raw_outcome = row[-1]
            if raw_outcome not in ("0", "1"):
                raise LoadError(f"{path} line {lineno}, column 'outcome': expected 0 or 1, got {raw_outcome!r}")
            records.append(PatientRecord(rid, values, treatment, int(raw_outcome)))
    return Cohort(schema, treatments, tuple(records))


def save_cohort(cohort: Cohort, path: Union[str, Path]) -> None:
    """Write the standard cohort CSV; ``load_cohort`` round-trips it exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *cohort.schema.names, "treatment", "outcome"])
        for r in cohort.records:
            cells = [r.id]
            for j, v in enumerate(r.features):
                if v is None:
                    cells.append("")
                elif cohort.schema[j].kind == CATEGORICAL:
                    cells.append(v)
                elif cohort.schema[j].kind == BINARY:
                    cells.append(str(int(v)))
                else:
                    cells.append(repr(float(v)))
            cells.append(r.treatment)
            cells.append(str(r.outcome))
            writer.writerow(cells)


def load_config(path: Union[str, Path]) -> tuple[FeatureSchema, TreatmentSet]:
    """Read the sidecar JSON declaring the schema and treatment set."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: invalid JSON ({e})") from None
    try:
        features = tuple(
            Feature(
                name=f["name"],
                kind=f["kind"],
                levels=tuple(f.get("levels", ())),
                unit=f.get("unit"),
            )
            for f in doc["features"]
        )
        treatments = TreatmentSet(tuple(doc["treatments"]))
    except (KeyError, TypeError) as e:
        raise LoadError(f"{path}: malformed config ({e})") from None
    return FeatureSchema(features), treatments


def save_config(schema: FeatureSchema, treatments: TreatmentSet, path: Union[str, Path]) -> None:
    doc = {
        "features": [
            {
                "name": f.name,
                "kind": f.kind,
                **({"levels": list(f.levels)} if f.kind == CATEGORICAL else {}),
                **({"unit": f.unit} if f.unit is not None else {}),
            }
            for f in schema.features
        ],
        "treatments": list(treatments.treatments),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _mode(values: Iterable[Value], feature: Feature) -> Value:
    """Most frequent observed value; ties broken by schema level order
    (0 before 1 for binary features)."""
    if feature.kind == CATEGORICAL:
        order = list(feature.levels)
    else:
        order = [0.0, 1.0]
    counts = {v: 0 for v in order}
    for v in values:
        if v is not None:
            counts[v] += 1
    best = order[int(np.argmax([counts[v] for v in order]))]
    return best if counts[best] > 0 else None


def _column_values(cohort: Cohort, j: int) -> list[Value]:
    return [r.features[j] for r in cohort.records]


def _fit_stats(fit_on: Cohort, rows: Optional[np.ndarray] = None) -> list[Value]:
    """Per-feature imputation statistic (mean for numerics, mode otherwise)
    over the given rows of ``fit_on``; None when nothing is observed."""
    stats: list[Value] = []
    idx = range(fit_on.n) if rows is None else rows
    for j, f in enumerate(fit_on.schema.features):
        observed = [fit_on.records[i].features[j] for i in idx]
        if f.kind == NUMERIC:
            vals = [v for v in observed if v is not None]
            stats.append(float(np.mean(vals)) if vals else None)
        else:
            stats.append(_mode(observed, f))
    return stats


def impute(cohort: Cohort, method: str, fit_on: Cohort) -> Cohort:
    """Fill every missing value; statistics come from ``fit_on`` only.

    ``mean`` uses the observed mean (numerics) or mode (binary/categorical);
    ``conditional_mean`` conditions those statistics on the record's treatment;
    ``forest`` predicts each missing cell from the other features with a
    bagged-tree model trained on the rows of ``fit_on`` where the target is
    observed.
    """
    if method not in ("mean", "conditional_mean", "forest"):
        raise ImputationError(f"unknown imputation method {method!r}")
    if fit_on.schema != cohort.schema:
        raise ImputationError("fit_on must share the cohort's schema")
    if not cohort.has_missing:
        return cohort

    if method == "mean":
        stats = _fit_stats(fit_on)
        for j, f in enumerate(cohort.schema.features):
            if stats[j] is None and any(r.features[j] is None for r in cohort.records):
                raise ImputationError(f"feature {f.name!r} has no observed values in fit_on")
        return _apply_fill(cohort, lambda i, j: stats[j])

    if method == "conditional_mean":
        group_stats: dict[str, list[Value]] = {}
        for t in cohort.treatments.treatments:
            rows = np.array([i for i, r in enumerate(fit_on.records) if r.treatment == t], dtype=int)
            group_stats[t] = _fit_stats(fit_on, rows) if len(rows) else [None] * len(cohort.schema)

        def fill(i: int, j: int) -> Value:
            v = group_stats[cohort.records[i].treatment][j]
            if v is None:
                raise ImputationError(
                    f"feature {cohort.schema[j].name!r} has no observed values in fit_on "
                    f"for treatment {cohort.records[i].treatment!r}"
                )
            return v

        return _apply_fill(cohort, fill)

    return _forest_impute(cohort, fit_on)


def _apply_fill(cohort: Cohort, fill) -> Cohort:
    new_records = []
    for i, r in enumerate(cohort.records):
        if all(v is not None for v in r.features):
            new_records.append(r)
            continue
        values = tuple(v if v is not None else fill(i, j) for j, v in enumerate(r.features))
        new_records.append(replace(r, features=values))
    return Cohort(cohort.schema, cohort.treatments, tuple(new_records))


_FOREST_SEED = 1903  # fixed so impute() stays a pure function of its arguments


def _forest_impute(cohort: Cohort, fit_on: Cohort) -> Cohort:
    from . import learners

    schema = cohort.schema
    p = len(schema)
    base_stats = _fit_stats(fit_on)
    for j, f in enumerate(schema.features):
        if base_stats[j] is None:
            raise ImputationError(f"feature {f.name!r} has no observed values in fit_on")

    def filled_matrix(c: Cohort) -> np.ndarray:
        X = c.feature_matrix.copy()
        for j, f in enumerate(schema.features):
            v = base_stats[j]
            code = float(f.levels.index(v)) if f.kind == CATEGORICAL else float(v)
            col = X[:, j]
            col[np.isnan(col)] = code
        return X

    fit_X = filled_matrix(fit_on)
    target_X = filled_matrix(cohort)
    fit_raw = fit_on.feature_matrix
    cat = schema.categorical_mask

    cfg = learners.EnsembleConfig(
        kind="bagged",
        n_estimators=30,
        subsample=0.9,
        base=learners.TreeLearnerConfig(max_depth=6, min_samples_leaf=3),
        seed=_FOREST_SEED,
    )
    others = [k for k in range(p)]
    fills: dict[int, np.ndarray] = {}
    for j, f in enumerate(schema.features):
        missing_rows = [i for i, r in enumerate(cohort.records) if r.features[j] is None]
        if not missing_rows:
            continue
        observed = ~np.isnan(fit_raw[:, j])
        if observed.sum() < 10:
            raise ImputationError(
                f"feature {f.name!r} has fewer than 10 observed rows in fit_on for forest imputation"
            )
        cols = [k for k in others if k != j]
        Xtr = fit_X[observed][:, cols]
        ytr = fit_raw[observed, j]
        Xq = target_X[np.array(missing_rows)][:, cols]
        cat_tr = cat[cols]
        cfg_j = replace(cfg, seed=_FOREST_SEED + j)
        if f.kind == NUMERIC:
            model = learners.fit_bagged_regressor(Xtr, ytr, cfg_j, categorical=cat_tr)
            pred = model.predict(Xq)
        elif f.kind == BINARY:
            clf = learners.fit_classifier(Xtr, ytr, cfg_j, categorical=cat_tr)
            pred = (clf.predict_proba_matrix(Xq) > 0.5).astype(float)
        else:
            scores = np.stack(
                [
                    learners.fit_classifier(
                        Xtr, (ytr == lv).astype(float), replace(cfg_j, seed=cfg_j.seed + 101 * (lv + 1)),
                        categorical=cat_tr,
                    ).predict_proba_matrix(Xq)
                    for lv in range(len(f.levels))
                ],
                axis=1,
            )
            pred = np.argmax(scores, axis=1).astype(float)
        fills[j] = dict(zip(missing_rows, pred))

    def fill(i: int, j: int) -> Value:
        v = fills[j][i]
        f = schema[j]
        if f.kind == CATEGORICAL:
            return f.levels[int(v)]
        return float(v)

    return _apply_fill(cohort, fill)


def split(cohort: Cohort, spec: SplitSpec) -> tuple[Cohort, Cohort]:
    """Seed-deterministic partition into (train, test)."""
    n = cohort.n
    if n < 2:
        raise CohortError("need at least two records to split")
    n_train = int(round(n * spec.train_fraction))
    if n_train < 1 or n_train >= n:
        raise CohortError(f"train_fraction {spec.train_fraction} leaves an empty side for n={n}")
    rng = make_rng(spec.seed)
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return cohort.subset(train_idx), cohort.subset(test_idx)
