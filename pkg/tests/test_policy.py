import numpy as np
import pytest

from rxtree.counterfactual import RewardMatrix
from rxtree.data import (
    CATEGORICAL,
    NUMERIC,
    Cohort,
    Feature,
    FeatureSchema,
    PatientRecord,
    TreatmentSet,
    make_rng,
)
from rxtree.learners import candidate_thresholds
from rxtree.policy import (
    Node,
    OptConfig,
    PolicyError,
    PolicyTree,
    TreeImportError,
    exhaustive_policy_search,
    export_tree,
    fit_policy_tree,
    import_tree,
    policy_objective,
    prescribe,
    route_cohort,
    tree_to_json,
)

from conftest import build_cohort, random_reward_instance


def depth0_tree(schema, treatments, arm=0):
    return PolicyTree(schema, treatments, (Node(id=1, prescription=arm, n_train=0),))


def depth1_tree(schema, treatments, feature, threshold, left_arm, right_arm):
    return PolicyTree(
        schema,
        treatments,
        (
            Node(id=1, feature=feature, threshold=threshold, left=2, right=3),
            Node(id=2, prescription=left_arm),
            Node(id=3, prescription=right_arm),
        ),
    )


def brute_force_best(cohort, reward, max_depth, min_leaf=1, k=32):
    """Independent oracle: enumerate depth-0 and depth-1 trees directly."""
    gamma = reward.values
    X = cohort.feature_matrix
    best = gamma.sum(axis=0).min()
    if max_depth == 0:
        return best
    for j in range(X.shape[1]):
        for th in candidate_thresholds(X[:, j], k):
            left = X[:, j] < th
            nl, nr = left.sum(), (~left).sum()
            if nl < min_leaf or nr < min_leaf:
                continue
            obj = gamma[left].sum(axis=0).min() + gamma[~left].sum(axis=0).min()
            best = min(best, obj)
    return best


class TestPolicyObjective:
    def test_selection(self):
        cohort = build_cohort([("a", (0.0,), "A", 0), ("b", (1.0,), "B", 1)])
        reward = RewardMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]), cohort.treatments)
        tree = depth1_tree(cohort.schema, cohort.treatments, 0, 0.5, left_arm=1, right_arm=0)
        assert policy_objective(tree, cohort, reward) == 0.0

    def test_depth0_is_column_sum(self):
        cohort, reward = random_reward_instance(0, n=30)
        tree = depth0_tree(cohort.schema, cohort.treatments, arm=1)
        assert policy_objective(tree, cohort, reward) == pytest.approx(reward.values[:, 1].sum())

    def test_best_depth1_never_worse_than_depth0(self):
        for seed in range(10):
            cohort, reward = random_reward_instance(seed, n=20, p=2)
            assert brute_force_best(cohort, reward, 1) <= brute_force_best(cohort, reward, 0) + 1e-12


class TestExhaustive:
    def test_depth0_best_single_treatment(self):
        cohort, reward = random_reward_instance(1, n=50)
        tree = exhaustive_policy_search(cohort, reward, max_depth=0)
        assert len(tree.nodes) == 1
        assert policy_objective(tree, cohort, reward) == pytest.approx(reward.values.sum(axis=0).min())

    def test_matches_brute_force_depth1(self):
        for seed in range(8):
            cohort, reward = random_reward_instance(seed, n=60, p=3)
            tree = exhaustive_policy_search(cohort, reward, max_depth=1, min_samples_leaf=2)
            assert policy_objective(tree, cohort, reward) == pytest.approx(
                brute_force_best(cohort, reward, 1, min_leaf=2)
            )

    def test_guards(self):
        cohort, reward = random_reward_instance(2, n=501)
        with pytest.raises(PolicyError, match="limited"):
            exhaustive_policy_search(cohort, reward, max_depth=1)
        cohort, reward = random_reward_instance(2, n=50)
        with pytest.raises(PolicyError, match="limited"):
            exhaustive_policy_search(cohort, reward, max_depth=3)


class TestFitPolicyTree:
    def separable_instance(self):
        rng = make_rng(77)
        n = 120
        x = rng.normal(size=n)
        gamma = np.zeros((n, 2))
        gamma[:, 0] = np.where(x < 0, 0.0, 1.0)
        gamma[:, 1] = np.where(x < 0, 1.0, 0.0)
        cohort = build_cohort(
            [(f"r{i}", (float(x[i]),), "A" if i % 2 else "B", int(i % 3 == 0)) for i in range(n)]
        )
        return cohort, RewardMatrix(gamma, cohort.treatments)

    def test_recovers_separating_split(self):
        cohort, reward = self.separable_instance()
        config = OptConfig(max_depth=1, min_samples_leaf=5, complexity_grid=(0.0,), n_restarts=3, seed=1)
        tree = fit_policy_tree(cohort, reward, config)
        root = tree.by_id[tree.root]
        assert not root.is_leaf
        assert tree.by_id[root.left].prescription == 0
        assert tree.by_id[root.right].prescription == 1
        assert policy_objective(tree, cohort, reward) == pytest.approx(
            brute_force_best(cohort, reward, 1, min_leaf=5)
        )

    def test_min_leaf_forces_depth0(self):
        cohort, reward = random_reward_instance(5, n=40)
        config = OptConfig(max_depth=4, min_samples_leaf=21, complexity_grid=(0.0,), n_restarts=2, seed=0)
        tree = fit_policy_tree(cohort, reward, config)
        assert len(tree.nodes) == 1
        assert tree.nodes[0].prescription == int(reward.values.sum(axis=0).argmin())

    def test_tiny_cohort_warns_and_returns_leaf(self):
        cohort, reward = random_reward_instance(6, n=5)
        config = OptConfig(max_depth=2, min_samples_leaf=50, complexity_grid=(0.0,), n_restarts=1, seed=0)
        with pytest.warns(UserWarning, match="depth-0"):
            tree = fit_policy_tree(cohort, reward, config)
        assert len(tree.nodes) == 1

    def test_deterministic_serialization(self):
        cohort, reward = random_reward_instance(7, n=150)
        config = OptConfig(max_depth=3, min_samples_leaf=10, n_restarts=4, seed=11)
        a = fit_policy_tree(cohort, reward, config)
        b = fit_policy_tree(cohort, reward, config)
        assert tree_to_json(a) == tree_to_json(b)

    def test_constraints_hold(self):
        for seed in range(5):
            cohort, reward = random_reward_instance(seed, n=200)
            config = OptConfig(max_depth=3, min_samples_leaf=15, complexity_grid=(0.0,), n_restarts=3, seed=seed)
            tree = fit_policy_tree(cohort, reward, config)
            assert tree.max_path_internals <= 3
            for leaf in tree.leaves:
                assert leaf.n_train >= 15

    def test_shift_invariance_at_zero_penalty(self):
        cohort, reward = random_reward_instance(9, n=150)
        config = OptConfig(max_depth=2, min_samples_leaf=10, complexity_grid=(0.0,), n_restarts=3, seed=3)
        base = fit_policy_tree(cohort, reward, config)
        shifted = RewardMatrix(reward.values + 7.5, cohort.treatments)
        other = fit_policy_tree(cohort, shifted, config)
        assert [n.prescription for n in base.nodes] == [n.prescription for n in other.nodes]
        assert [(n.feature, n.threshold) for n in base.nodes] == [
            (n.feature, n.threshold) for n in other.nodes
        ]

    def test_scale_invariance_with_penalty(self):
        cohort, reward = random_reward_instance(10, n=150)
        config = OptConfig(max_depth=2, min_samples_leaf=10, complexity_grid=(0.0, 2.0), n_restarts=3, seed=3)
        base = fit_policy_tree(cohort, reward, config)
        scaled = RewardMatrix(reward.values * 3.0, cohort.treatments)
        other = fit_policy_tree(cohort, scaled, config)
        assert [n.prescription for n in base.nodes] == [n.prescription for n in other.nodes]
        assert [(n.feature, n.threshold) for n in base.nodes] == [
            (n.feature, n.threshold) for n in other.nodes
        ]

    def test_exhaustive_never_worse(self):
        for seed in range(5):
            cohort, reward = random_reward_instance(seed + 40, n=150)
            config = OptConfig(max_depth=2, min_samples_leaf=10, complexity_grid=(0.0,), n_restarts=3, seed=seed)
            cd = fit_policy_tree(cohort, reward, config)
            ex = exhaustive_policy_search(cohort, reward, max_depth=2, min_samples_leaf=10)
            assert policy_objective(ex, cohort, reward) <= policy_objective(cd, cohort, reward) + 1e-9

    def test_descent_never_worse_than_depth0(self):
        # the search starts from (at worst) a single leaf and only accepts
        # strict improvements, so it can never lose to the best single arm
        for seed in range(8):
            cohort, reward = random_reward_instance(seed + 60, n=120)
            config = OptConfig(max_depth=3, min_samples_leaf=10, complexity_grid=(0.0,), n_restarts=2, seed=seed)
            tree = fit_policy_tree(cohort, reward, config)
            depth0 = reward.values.sum(axis=0).min()
            assert policy_objective(tree, cohort, reward) <= depth0 + 1e-9

    def test_descent_objective_monotone_across_moves(self):
        from rxtree.policy import _Search, _Work, _coordinate_descent, _greedy_init

        cohort, reward = random_reward_instance(70, n=200)
        search = _Search(
            cohort.feature_matrix, reward.values, cohort.schema.categorical_mask, 3, 10, 32
        )
        rng = make_rng(4)
        work = _Work()
        _greedy_init(search, work, 0.0, rng)
        rows = np.arange(cohort.n)

        def objective():
            slots, leaves = search.route_slots(work, rows, 0)
            return search.leaf_contribution(rows, slots, len(leaves))

        before = objective()
        _coordinate_descent(search, work, 0.0, rng)
        assert objective() <= before + 1e-9

    def test_categorical_splits(self):
        rng = make_rng(12)
        schema = FeatureSchema((Feature("color", CATEGORICAL, ("red", "green", "blue")),))
        ts = TreatmentSet(("A", "B"))
        n = 90
        levels = rng.integers(0, 3, n)
        gamma = np.zeros((n, 2))
        gamma[:, 0] = np.where(levels == 1, 0.0, 1.0)
        gamma[:, 1] = np.where(levels == 1, 1.0, 0.0)
        records = tuple(
            PatientRecord(f"r{i}", (("red", "green", "blue")[levels[i]],), "A", 0)
            for i in range(n)
        )
        cohort = Cohort(schema, ts, records)
        config = OptConfig(max_depth=1, min_samples_leaf=5, complexity_grid=(0.0,), n_restarts=3, seed=0)
        tree = fit_policy_tree(cohort, RewardMatrix(gamma, ts), config)
        root = tree.by_id[tree.root]
        assert root.levels == ("green",)
        assert tree.by_id[root.left].prescription == 0


class TestPrescribe:
    def test_depth0(self, toy_schema, toy_treatments):
        tree = depth0_tree(toy_schema, toy_treatments, arm=1)
        treatment, leaf, stats = prescribe(tree, [60.0, 1.0, "low"])
        assert treatment == "Evolut"
        assert leaf == 1

    def test_boundary_goes_right(self):
        schema = FeatureSchema((Feature("x", NUMERIC),))
        ts = TreatmentSet(("A", "B"))
        tree = depth1_tree(schema, ts, 0, 5.0, left_arm=0, right_arm=1)
        assert prescribe(tree, [5.0])[0] == "B"
        assert prescribe(tree, [4.999999])[0] == "A"

    def test_missing_value_rejected(self):
        schema = FeatureSchema((Feature("x", NUMERIC),))
        ts = TreatmentSet(("A", "B"))
        tree = depth1_tree(schema, ts, 0, 5.0, 0, 1)
        with pytest.raises(PolicyError, match="impute"):
            prescribe(tree, [None])
        with pytest.raises(PolicyError, match="impute"):
            prescribe(tree, [float("nan")])

    def test_categorical_routing(self):
        schema = FeatureSchema((Feature("g", CATEGORICAL, ("u", "v", "w")),))
        ts = TreatmentSet(("A", "B"))
        tree = PolicyTree(
            schema,
            ts,
            (
                Node(id=1, feature=0, levels=("u", "w"), left=2, right=3),
                Node(id=2, prescription=0),
                Node(id=3, prescription=1),
            ),
        )
        assert prescribe(tree, ["u"])[0] == "A"
        assert prescribe(tree, ["w"])[0] == "A"
        assert prescribe(tree, ["v"])[0] == "B"


class TestRouting:
    def test_name_resolution_against_superset_schema(self):
        tree_schema = FeatureSchema((Feature("b", NUMERIC),))
        ts = TreatmentSet(("A", "B"))
        tree = depth1_tree(tree_schema, ts, 0, 0.5, 0, 1)
        cohort_schema = FeatureSchema((Feature("a", NUMERIC), Feature("b", NUMERIC)))
        cohort = build_cohort(
            [("r1", (9.0, 0.0), "A", 0), ("r2", (9.0, 1.0), "B", 1)],
            schema=cohort_schema,
        )
        leaf_ids = route_cohort(tree, cohort)
        assert leaf_ids.tolist() == [2, 3]

    def test_absent_feature_errors(self):
        tree_schema = FeatureSchema((Feature("zz", NUMERIC),))
        ts = TreatmentSet(("A", "B"))
        tree = depth1_tree(tree_schema, ts, 0, 0.5, 0, 1)
        cohort = build_cohort([("r1", (0.0,), "A", 0)])
        with pytest.raises(PolicyError, match="zz"):
            route_cohort(tree, cohort)

    def test_kind_mismatch_rejected(self):
        tree_schema = FeatureSchema((Feature("x0", CATEGORICAL, ("a", "b")),))
        ts = TreatmentSet(("A", "B"))
        tree = PolicyTree(
            tree_schema, ts,
            (Node(id=1, feature=0, levels=("a",), left=2, right=3),
             Node(id=2, prescription=0), Node(id=3, prescription=1)),
        )
        cohort = build_cohort([("r1", (0.0,), "A", 0)])  # x0 numeric here
        with pytest.raises(PolicyError, match="numeric"):
            route_cohort(tree, cohort)

    def test_categorical_levels_resolved_by_name(self):
        # the cohort declares the same levels in a different order; routing
        # must follow level names, not level positions
        ts = TreatmentSet(("A", "B"))
        tree_schema = FeatureSchema((Feature("g", CATEGORICAL, ("u", "v")),))
        tree = PolicyTree(
            tree_schema, ts,
            (Node(id=1, feature=0, levels=("u",), left=2, right=3),
             Node(id=2, prescription=0), Node(id=3, prescription=1)),
        )
        cohort_schema = FeatureSchema((Feature("g", CATEGORICAL, ("v", "u")),))
        cohort = Cohort(
            cohort_schema, ts,
            (PatientRecord("r1", ("u",), "A", 0), PatientRecord("r2", ("v",), "B", 1)),
        )
        assert route_cohort(tree, cohort).tolist() == [2, 3]

    def test_missing_level_rejected(self):
        ts = TreatmentSet(("A", "B"))
        tree_schema = FeatureSchema((Feature("g", CATEGORICAL, ("u", "v")),))
        tree = PolicyTree(
            tree_schema, ts,
            (Node(id=1, feature=0, levels=("v",), left=2, right=3),
             Node(id=2, prescription=0), Node(id=3, prescription=1)),
        )
        cohort_schema = FeatureSchema((Feature("g", CATEGORICAL, ("u", "w")),))
        cohort = Cohort(cohort_schema, ts, (PatientRecord("r1", ("u",), "A", 0),))
        with pytest.raises(PolicyError, match="lacks level"):
            route_cohort(tree, cohort)


class TestSerialization:
    def fitted_tree(self):
        cohort, reward = random_reward_instance(20, n=150, p=3)
        config = OptConfig(max_depth=2, min_samples_leaf=10, complexity_grid=(0.0,), n_restarts=3, seed=2)
        return fit_policy_tree(cohort, reward, config)

    def test_round_trip_bytes(self):
        tree = self.fitted_tree()
        doc = tree_to_json(tree)
        assert tree_to_json(import_tree(doc)) == doc

    def test_schema_lists_only_used_features(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        used = {tree.schema[n.feature].name for n in tree.nodes if not n.is_leaf}
        assert {f["name"] for f in doc["schema"]} == used

    def test_version_checked(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        doc["version"] = 99
        with pytest.raises(TreeImportError, match="version"):
            import_tree(doc)

    def test_dangling_child_rejected(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        for node in doc["nodes"]:
            if node["kind"] == "split":
                node["right"] = 404
                break
        with pytest.raises(TreeImportError, match="dangling"):
            import_tree(doc)

    def test_unknown_feature_rejected(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        for node in doc["nodes"]:
            if node["kind"] == "split":
                node["feature"] = "nonexistent"
                break
        with pytest.raises(TreeImportError, match="nonexistent"):
            import_tree(doc)

    def test_unknown_prescription_rejected(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        for node in doc["nodes"]:
            if node["kind"] == "leaf":
                node["prescription"] = "Inoue"
                break
        with pytest.raises(TreeImportError, match="Inoue"):
            import_tree(doc)

    def test_parse_from_string(self):
        tree = self.fitted_tree()
        text = tree_to_json(tree)
        again = import_tree(text)
        assert tree_to_json(again) == text

    def test_stats_round_trip(self):
        tree = self.fitted_tree()
        doc = export_tree(tree)
        again = import_tree(doc)
        for a, b in zip(tree.leaves, again.leaves):
            assert a.stats.counts == b.stats.counts
            assert a.stats.historical_rates == b.stats.historical_rates
