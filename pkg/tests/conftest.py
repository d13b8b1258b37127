import pytest

from rxtree.data import (
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
from rxtree.counterfactual import RewardMatrix


def build_cohort(rows, schema=None, treatments=("A", "B")):
    """rows: list of (id, feature tuple, treatment, outcome)."""
    if schema is None:
        width = len(rows[0][1])
        schema = FeatureSchema(tuple(Feature(f"x{j}", NUMERIC) for j in range(width)))
    ts = TreatmentSet(tuple(treatments))
    records = tuple(PatientRecord(r[0], tuple(r[1]), r[2], r[3]) for r in rows)
    return Cohort(schema, ts, records)


def random_reward_instance(seed, n=200, p=4, n_t=2):
    """Random numeric cohort plus a random reward matrix on n_t arms."""
    rng = make_rng(seed, 555)
    X = rng.normal(size=(n, p))
    gamma = rng.normal(size=(n, n_t))
    schema = FeatureSchema(tuple(Feature(f"f{j}", NUMERIC) for j in range(p)))
    ts = TreatmentSet(tuple(f"t{k}" for k in range(n_t)))
    records = tuple(
        PatientRecord(
            f"r{i}",
            tuple(float(v) for v in X[i]),
            ts.treatments[int(rng.integers(n_t))],
            int(rng.integers(2)),
        )
        for i in range(n)
    )
    return Cohort(schema, ts, records), RewardMatrix(gamma, ts)


@pytest.fixture
def toy_schema():
    return FeatureSchema(
        (
            Feature("age", NUMERIC, unit="years"),
            Feature("flag", BINARY),
            Feature("grade", CATEGORICAL, levels=("low", "mid", "high")),
        )
    )


@pytest.fixture
def toy_treatments():
    return TreatmentSet(("Sapien", "Evolut"))
