"""Synthetic cohorts with known potential outcomes.

Potential outcome probabilities are piecewise constant on axis-aligned
regions, so the true optimal policy is exactly representable by a decision
tree and every downstream estimate can be checked against the generator.
Treatment assignment follows a softmax over per-treatment linear scores,
giving analytically known propensities and tunable confounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import (
    BINARY,
    CATEGORICAL,
    NUMERIC,
    Cohort,
    Feature,
    FeatureSchema,
    PatientRecord,
    TreatmentSet,
    make_rng,
)
from .counterfactual import RewardMatrix


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class Marginal:
    """Sampling distribution of one feature: normal(mu, sigma),
    uniform(lo, hi), or bernoulli(p)."""

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "bernoulli"):
            raise SynthError(f"unknown marginal kind {self.kind!r}")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.params[0], self.params[1], size=n)
        if self.kind == "uniform":
            return rng.uniform(self.params[0], self.params[1], size=n)
        return (rng.random(n) < self.params[0]).astype(float)


@dataclass(frozen=True)
class Condition:
    """Half-open interval constraint lo <= x < hi on one feature (None = unbounded)."""

    feature: str
    lo: Optional[float] = None
    hi: Optional[float] = None


@dataclass(frozen=True)
class Region:
    conditions: tuple[Condition, ...]
    probability: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise SynthError("region probability must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator configuration; ``potential_outcome[t]`` must partition the
    feature space for every treatment."""

    schema: FeatureSchema
    treatments: TreatmentSet
    marginals: tuple[Marginal, ...]
    n: int
    potential_outcome: tuple[tuple[Region, ...], ...]
    assignment_weights: tuple[tuple[float, ...], ...]  # per treatment: p weights + intercept
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise SynthError("n must be >= 1")
        if len(self.marginals) != len(self.schema):
            raise SynthError("need one marginal per schema feature")
        if len(self.potential_outcome) != len(self.treatments):
            raise SynthError("need one region list per treatment")
        p = len(self.schema)
        for w in self.assignment_weights:
            if len(w) != p + 1:
                raise SynthError("assignment weights need one entry per feature plus an intercept")


@dataclass(frozen=True)
class TruthBundle:
    """Everything the generator knows: the verification oracle."""

    propensities: np.ndarray  # n x n_t, true P(T = t | x)
    probabilities: np.ndarray  # n x n_t, true P(y = 1 | x, t)
    optimal_arms: np.ndarray  # argmin over treatments, ties to treatment order
    optimal_value: float  # mean of the row minima
    historical_value: float  # mean true probability under the assigned arms

    def to_doc(self, ids: Sequence[str], treatments: TreatmentSet) -> dict:
        names = treatments.treatments
        return {
            "treatments": list(names),
            "optimal_value": self.optimal_value,
            "historical_value": self.historical_value,
            "records": [
                {
                    "id": rid,
                    "propensities": self.propensities[i].tolist(),
                    "probabilities": self.probabilities[i].tolist(),
                    "optimal_arm": names[int(self.optimal_arms[i])],
                }
                for i, rid in enumerate(ids)
            ],
        }


def _region_mask(region: Region, X: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    mask = np.ones(X.shape[0], dtype=bool)
    for cond in region.conditions:
        col = X[:, schema.index(cond.feature)]
        if cond.lo is not None:
            mask &= col >= cond.lo
        if cond.hi is not None:
            mask &= col < cond.hi
    return mask


def true_probabilities(spec: SyntheticSpec, X: np.ndarray) -> np.ndarray:
    """Per-record potential outcome probability under each treatment; raises
    unless every record matches exactly one region per treatment."""
    n = X.shape[0]
    probs = np.full((n, len(spec.treatments)), np.nan)
    for t, regions in enumerate(spec.potential_outcome):
        hits = np.zeros(n, dtype=int)
        for region in regions:
            mask = _region_mask(region, X, spec.schema)
            probs[mask, t] = region.probability
            hits += mask
        if (hits != 1).any():
            bad = int(np.nonzero(hits != 1)[0][0])
            raise SynthError(
                f"regions for treatment {spec.treatments.treatments[t]!r} do not partition "
                f"the feature space (record {bad} matched {hits[bad]} regions)"
            )
    return probs


def true_propensities(spec: SyntheticSpec, X: np.ndarray) -> np.ndarray:
    W = np.array(spec.assignment_weights, dtype=float)
    scores = X @ W[:, :-1].T + W[:, -1]
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> tuple[Cohort, TruthBundle]:
    """Draw a cohort and its oracle bundle, deterministic in the spec seed."""
    rng = make_rng(spec.seed)
    n = spec.n
    X = np.column_stack([m.draw(rng, n) for m in spec.marginals])
    props = true_propensities(spec, X)
    u = rng.random(n)
    T = (u[:, None] >= np.cumsum(props, axis=1)).sum(axis=1)
    T = np.minimum(T, len(spec.treatments) - 1)
    probs = true_probabilities(spec, X)
    rows = np.arange(n)
    y = (rng.random(n) < probs[rows, T]).astype(int)

    width = len(str(n))
    records = []
    for i in range(n):
        values = []
        for j, f in enumerate(spec.schema.features):
            if f.kind == CATEGORICAL:
                values.append(f.levels[int(X[i, j])])
            else:
                values.append(float(X[i, j]))
        records.append(
            PatientRecord(
                id=f"s{i + 1:0{width}d}",
                features=tuple(values),
                treatment=spec.treatments.treatments[int(T[i])],
                outcome=int(y[i]),
            )
        )
    cohort = Cohort(spec.schema, spec.treatments, tuple(records))
    optimal_arms = probs.argmin(axis=1)
    truth = TruthBundle(
        propensities=props,
        probabilities=probs,
        optimal_arms=optimal_arms,
        optimal_value=float(probs.min(axis=1).mean()),
        historical_value=float(probs[rows, T].mean()),
    )
    return cohort, truth


def oracle_reward(truth: TruthBundle, treatments: TreatmentSet) -> RewardMatrix:
    """The true probability matrix packaged as an oracle reward."""
    return RewardMatrix(truth.probabilities.copy(), treatments, provenance="oracle")


def policy_true_value(truth: TruthBundle, arms: np.ndarray) -> float:
    """Mean true outcome probability when each record gets arms[i]."""
    return float(truth.probabilities[np.arange(len(arms)), arms].mean())


# ---------------------------------------------------------------------------
# preset

PRESET_ROOT_FEATURE = "conduction_defect"
_ANNULUS_CUT = 21.5
_GRADIENT_CUT = 64.0


def tavr_like_preset(n: int, seed: int) -> SyntheticSpec:
    """Valve-prescription-shaped preset: a binary conduction-defect flag plus
    four echo/CT-style numerics, arm probabilities in the 3-40% band, and the
    defect flag as the dominant effect modifier.

    Ground truth: with a conduction defect the self-expanding arm is safer
    everywhere (strongly so for small annuli); without one the
    balloon-expandable arm is safer, and its risk is flat so leaf-level
    historical rates stay unconfounded under the prescribed arm.
    """
    if n < 200:
        raise SynthError("preset cohorts need n >= 200")
    schema = FeatureSchema(
        (
            Feature(PRESET_ROOT_FEATURE, BINARY),
            Feature("minor_aortic_annulus_diameter", NUMERIC, unit="mm"),
            Feature("peak_aortic_valve_gradient", NUMERIC, unit="mmHg"),
            Feature("lv_internal_diastolic_dimension", NUMERIC, unit="cm"),
            Feature("weight", NUMERIC, unit="kg"),
        )
    )
    treatments = TreatmentSet(("Sapien", "Evolut"))
    marginals = (
        Marginal("bernoulli", (0.28,)),
        Marginal("normal", (21.9, 1.8)),
        Marginal("normal", (70.0, 16.0)),
        Marginal("normal", (4.5, 0.55)),
        Marginal("normal", (78.0, 15.0)),
    )
    cd = PRESET_ROOT_FEATURE
    ann = "minor_aortic_annulus_diameter"
    grad = "peak_aortic_valve_gradient"
    sapien = (
        Region((Condition(cd, lo=0.5), Condition(ann, hi=_ANNULUS_CUT)), 0.38),
        Region((Condition(cd, lo=0.5), Condition(ann, lo=_ANNULUS_CUT)), 0.28),
        Region((Condition(cd, hi=0.5),), 0.07),
    )
    evolut = (
        Region((Condition(cd, lo=0.5),), 0.10),
        Region((Condition(cd, hi=0.5), Condition(grad, hi=_GRADIENT_CUT)), 0.13),
        Region((Condition(cd, hi=0.5), Condition(grad, lo=_GRADIENT_CUT)), 0.19),
    )
    # score for Evolut relative to Sapien: defects and small annuli historically
    # steer toward the self-expanding platform, high gradients slightly too
    evolut_w = [0.0] * len(schema) + [0.0]
    evolut_w[schema.index(cd)] = 0.8
    evolut_w[schema.index(ann)] = -0.15
    evolut_w[schema.index(grad)] = 0.008
    evolut_w[schema.index("weight")] = -0.003
    intercept = -1.27 + 0.15 * 21.9 - 0.008 * 70.0 + 0.003 * 78.0
    evolut_w[-1] = intercept
    weights = (tuple([0.0] * (len(schema) + 1)), tuple(evolut_w))
    return SyntheticSpec(
        schema=schema,
        treatments=treatments,
        marginals=marginals,
        n=n,
        potential_outcome=(sapien, evolut),
        assignment_weights=weights,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# JSON round-trip for specs


def spec_to_doc(spec: SyntheticSpec) -> dict:
    return {
        "n": spec.n,
        "seed": spec.seed,
        "features": [
            {
                "name": f.name,
                "kind": f.kind,
                **({"levels": list(f.levels)} if f.kind == CATEGORICAL else {}),
                **({"unit": f.unit} if f.unit is not None else {}),
                "marginal": {"kind": m.kind, "params": list(m.params)},
            }
            for f, m in zip(spec.schema.features, spec.marginals)
        ],
        "treatments": list(spec.treatments.treatments),
        "potential_outcome": {
            t: [
                {
                    "probability": r.probability,
                    "conditions": [
                        {"feature": c.feature, "lo": c.lo, "hi": c.hi} for c in r.conditions
                    ],
                }
                for r in regions
            ]
            for t, regions in zip(spec.treatments.treatments, spec.potential_outcome)
        },
        "assignment_weights": [list(w) for w in spec.assignment_weights],
    }


def spec_from_doc(doc: Union[dict, str]) -> SyntheticSpec:
    if isinstance(doc, str):
        doc = json.loads(doc)
    features = tuple(
        Feature(f["name"], f["kind"], tuple(f.get("levels", ())), f.get("unit"))
        for f in doc["features"]
    )
    schema = FeatureSchema(features)
    treatments = TreatmentSet(tuple(doc["treatments"]))
    marginals = tuple(
        Marginal(f["marginal"]["kind"], tuple(f["marginal"]["params"])) for f in doc["features"]
    )
    outcome = tuple(
        tuple(
            Region(
                tuple(Condition(c["feature"], c.get("lo"), c.get("hi")) for c in r["conditions"]),
                r["probability"],
            )
            for r in doc["potential_outcome"][t]
        )
        for t in treatments.treatments
    )
    return SyntheticSpec(
        schema=schema,
        treatments=treatments,
        marginals=marginals,
        n=int(doc["n"]),
        potential_outcome=outcome,
        assignment_weights=tuple(tuple(w) for w in doc["assignment_weights"]),
        seed=int(doc["seed"]),
    )


def save_spec(spec: SyntheticSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(spec_to_doc(spec), indent=2) + "\n", encoding="utf-8")


def load_spec(path: Union[str, Path]) -> SyntheticSpec:
    return spec_from_doc(Path(path).read_text(encoding="utf-8"))
