import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rxtree.learners import (
    EnsembleConfig,
    LearnerError,
    TreeLearnerConfig,
    auc_roc,
    calibration_curve,
    candidate_thresholds,
    constant_classifier,
    cross_validated_select,
    feature_importance,
    fit_classifier,
    predict_proba,
)
from rxtree.data import make_rng


def boosted(n_estimators=30, lr=0.1, depth=3, seed=0, subsample=1.0, min_leaf=1):
    return EnsembleConfig(
        kind="boosted",
        n_estimators=n_estimators,
        learning_rate=lr,
        subsample=subsample,
        base=TreeLearnerConfig(max_depth=depth, min_samples_leaf=min_leaf),
        seed=seed,
    )


def separable_data(n=60):
    rng = make_rng(0)
    X = np.column_stack([rng.normal(size=n), rng.normal(size=n)])
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    return X, y


class TestFitClassifier:
    def test_separable_training_auc_is_one(self):
        X, y = separable_data()
        model = fit_classifier(X, y, boosted(n_estimators=60, lr=0.3))
        assert auc_roc(y, model.predict_proba_matrix(X)) == 1.0

    def test_all_negative_labels_degenerate(self):
        X = np.array([[0.0], [1.0], [2.0]])
        model = fit_classifier(X, np.zeros(3), boosted())
        assert model.kind == "constant"
        assert np.all(model.predict_proba_matrix(X) == 0.0)

    def test_constant_classifier_class_rate(self):
        model = constant_classifier(np.mean([1, 1, 1, 0]), n_features=2)
        assert predict_proba(model, [5.0, -1.0]) == 0.75

    def test_deterministic_for_seed(self):
        rng = make_rng(3)
        X = rng.normal(size=(80, 3))
        y = (rng.random(80) < 0.4).astype(float)
        a = fit_classifier(X, y, boosted(seed=9, subsample=0.7))
        b = fit_classifier(X, y, boosted(seed=9, subsample=0.7))
        q = rng.normal(size=(10, 3))
        assert np.array_equal(a.predict_proba_matrix(q), b.predict_proba_matrix(q))

    def test_probabilities_in_unit_interval(self):
        rng = make_rng(4)
        X = rng.normal(size=(50, 2))
        y = (rng.random(50) < 0.5).astype(float)
        model = fit_classifier(X, y, boosted(lr=1.0, n_estimators=80))
        probs = model.predict_proba_matrix(rng.normal(size=(200, 2)) * 10)
        assert np.all((probs >= 0) & (probs <= 1))

    def test_missing_values_rejected(self):
        X, y = separable_data()
        model = fit_classifier(X, y, boosted())
        with pytest.raises(LearnerError, match="[Mm]issing"):
            predict_proba(model, [np.nan, 1.0])

    def test_boosted_train_loss_non_increasing(self):
        rng = make_rng(7)
        X = rng.normal(size=(120, 3))
        logits = 1.5 * X[:, 0] - X[:, 1]
        y = (rng.random(120) < 1 / (1 + np.exp(-logits))).astype(float)
        model = fit_classifier(X, y, boosted(n_estimators=50, lr=0.1))
        losses = np.array(model.train_losses)
        assert losses.size == 50
        assert np.all(np.diff(losses) <= 1e-12)

    def test_bagged_single_tree_ignores_seed(self):
        # subsample=1 with one estimator is a plain tree fit, so the seed is inert
        rng = make_rng(8)
        X = rng.normal(size=(50, 2))
        y = (X[:, 0] > 0.2).astype(float)
        cfg_a = EnsembleConfig(kind="bagged", n_estimators=1, subsample=1.0,
                               base=TreeLearnerConfig(max_depth=3), seed=1)
        cfg_b = EnsembleConfig(kind="bagged", n_estimators=1, subsample=1.0,
                               base=TreeLearnerConfig(max_depth=3), seed=99)
        q = rng.normal(size=(30, 2))
        pa = fit_classifier(X, y, cfg_a).predict_proba_matrix(q)
        pb = fit_classifier(X, y, cfg_b).predict_proba_matrix(q)
        assert np.array_equal(pa, pb)

    def test_bagged_single_tree_equals_plain_tree_fit(self):
        from rxtree.learners import _Binned, _fit_tree

        rng = make_rng(18)
        X = rng.normal(size=(60, 3))
        y = (X[:, 1] + 0.3 * X[:, 0] > 0).astype(float)
        base = TreeLearnerConfig(max_depth=4, min_samples_leaf=2)
        cfg = EnsembleConfig(kind="bagged", n_estimators=1, subsample=1.0, base=base, seed=5)
        bag = fit_classifier(X, y, cfg)
        binned = _Binned(X, np.zeros(3, bool), base.n_candidate_thresholds)
        tree = _fit_tree(binned, np.arange(60), y, base, np.zeros(3))
        q = rng.normal(size=(40, 3))
        assert np.array_equal(bag.predict_proba_matrix(q), np.clip(tree.predict(q), 0, 1))

    def test_stratified_folds_balance_labels(self):
        from rxtree.learners import _stratified_folds

        y = np.array([1.0] * 10 + [0.0] * 90)
        folds = _stratified_folds(y, k=5, seed=0)
        for f in range(5):
            assert y[folds == f].sum() == 2  # positives spread evenly
        again = _stratified_folds(y, k=5, seed=0)
        assert np.array_equal(folds, again)


class TestCrossValidation:
    def test_singleton_grid(self):
        X, y = separable_data()
        cfg = boosted()
        assert cross_validated_select(X, y, [cfg], k=3) is cfg

    def test_dominant_config_wins(self):
        # XOR labels: depth-1 stumps are useless, depth-2 separates
        rng = make_rng(9)
        X = (rng.random(size=(240, 2)) < 0.5).astype(float)
        y = np.logical_xor(X[:, 0], X[:, 1]).astype(float)
        weak = boosted(n_estimators=5, depth=1)
        strong = boosted(n_estimators=20, depth=2)
        assert cross_validated_select(X, y, [weak, strong], k=3) is strong

    def test_tie_takes_first(self):
        X, y = separable_data()
        a = boosted(seed=0)
        b = boosted(seed=0)
        assert cross_validated_select(X, y, [a, b], k=3) is a

    def test_rejects_short_data(self):
        with pytest.raises(LearnerError):
            cross_validated_select(np.zeros((2, 1)), np.array([0.0, 1.0]), [boosted()], k=3)


class TestAuc:
    def test_perfect_ranking(self):
        assert auc_roc([0, 1], [0.1, 0.9]) == 1.0

    def test_reversed_ranking(self):
        assert auc_roc([0, 1], [0.9, 0.1]) == 0.0

    def test_all_tied(self):
        assert auc_roc([0, 1], [0.5, 0.5]) == 0.5

    def test_single_class_errors(self):
        with pytest.raises(LearnerError):
            auc_roc([1, 1], [0.2, 0.9])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariant_under_increasing_transform(self, seed):
        rng = make_rng(seed)
        n = int(rng.integers(4, 40))
        y = rng.integers(0, 2, size=n).astype(float)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.normal(size=n)
        transformed = np.exp(2.0 * s) + 3.0
        assert auc_roc(y, s) == pytest.approx(auc_roc(y, transformed), abs=1e-12)


class TestCalibration:
    def test_constant_score_single_bucket(self):
        labels = [1, 0, 0, 1, 0, 0, 0, 1, 0, 0]
        scores = [0.3] * 10
        points = calibration_curve(labels, scores, n_buckets=1, trim=0.0)
        assert len(points) == 1
        assert points[0][0] == pytest.approx(0.3)
        assert points[0][1] == pytest.approx(0.3)
        assert points[0][2] == 10

    def test_single_bucket_holds_everything(self):
        rng = make_rng(1)
        y = rng.integers(0, 2, 50).astype(float)
        s = rng.random(50)
        points = calibration_curve(y, s, n_buckets=1, trim=0.0)
        assert points[0][2] == 50

    def test_fewer_samples_than_buckets(self):
        points = calibration_curve([0, 1, 1], [0.1, 0.5, 0.9], n_buckets=10, trim=0.0)
        assert len(points) == 3
        assert all(count == 1 for _, _, count in points)

    def test_trim_drops_tails(self):
        y = np.zeros(100)
        s = np.arange(100, dtype=float)
        points = calibration_curve(y, s, n_buckets=1, trim=0.1)
        assert points[0][2] == 90
        assert points[0][0] == np.mean(np.arange(5, 95))

    def test_simulated_bernoulli_calibrated(self):
        # independent oracle: draw outcomes at known probabilities and check
        # each bucket's observed rate tracks its mean predicted score
        rng = make_rng(123)
        n = 10_000
        p = rng.uniform(0.05, 0.95, size=n)
        y = (rng.random(n) < p).astype(float)
        points = calibration_curve(y, p, n_buckets=10, trim=0.05)
        assert len(points) == 10
        for mean_score, observed, count in points:
            se = np.sqrt(mean_score * (1 - mean_score) / count)
            assert abs(mean_score - observed) < 5 * se + 1e-9


class TestFeatureImportance:
    def test_no_split_is_zero(self):
        X = np.ones((10, 3))
        y = np.array([0, 1] * 5, dtype=float)
        model = fit_classifier(X, y, boosted(n_estimators=5))
        assert np.array_equal(feature_importance(model), np.zeros(3))

    def test_single_split_concentrates(self):
        X = np.column_stack([np.ones(20), np.arange(20.0)])
        y = (X[:, 1] >= 10).astype(float)
        model = fit_classifier(X, y, boosted(n_estimators=1, depth=1))
        imp = feature_importance(model)
        assert imp[1] == 1.0 and imp[0] == 0.0

    def test_informative_feature_dominates(self):
        rng = make_rng(21)
        n = 400
        X = rng.normal(size=(n, 4))
        y = (rng.random(n) < 1 / (1 + np.exp(-3 * X[:, 2]))).astype(float)
        model = fit_classifier(X, y, boosted(n_estimators=40, depth=2))
        imp = feature_importance(model)
        assert imp.argmax() == 2
        assert imp.sum() == pytest.approx(1.0)


class TestAuditSerialization:
    def test_model_document_is_json_serializable(self):
        import json

        X, y = separable_data()
        model = fit_classifier(X, y, boosted(n_estimators=3, seed=7))
        doc = model.to_doc()
        text = json.dumps(doc)
        assert doc["kind"] == "boosted"
        assert doc["config"]["seed"] == 7
        assert len(doc["trees"]) == 3
        assert json.loads(text) == doc


class TestThresholds:
    def test_midpoints(self):
        th = candidate_thresholds(np.array([1.0, 2.0, 3.0]), 32)
        assert np.array_equal(th, [1.5, 2.5])

    def test_capped(self):
        th = candidate_thresholds(np.arange(100.0), 32)
        assert th.size <= 32

    def test_constant_column_empty(self):
        assert candidate_thresholds(np.full(5, 2.0), 32).size == 0
