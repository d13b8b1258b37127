"""Treatment-prescription trees from observational tabular data.

Learn an interpretable policy tree that assigns each record the treatment
minimizing its estimated outcome, where the estimates come from doubly robust
counterfactual estimation, and evaluate it by leaf-level node analysis,
counterfactual evaluation, and bootstrap confidence intervals.
"""

__version__ = "0.1.0"

from .data import (
    BINARY,
    CATEGORICAL,
    NUMERIC,
    Cohort,
    CohortError,
    Feature,
    FeatureSchema,
    ImputationError,
    LoadError,
    PatientRecord,
    SplitSpec,
    TreatmentSet,
    impute,
    load_cohort,
    load_config,
    save_cohort,
    save_config,
    split,
)
from .learners import (
    EnsembleConfig,
    LearnerError,
    ProbabilisticClassifier,
    TreeLearnerConfig,
    auc_roc,
    calibration_curve,
    constant_classifier,
    cross_validated_select,
    feature_importance,
    fit_classifier,
    predict_proba,
)
from .counterfactual import (
    CounterfactualConfig,
    CounterfactualError,
    OutcomePredictions,
    PropensityEstimates,
    RewardMatrix,
    default_grid,
    doubly_robust,
    fit_outcome_estimators,
    fit_propensity,
    fit_reward,
    leaf_rate_reconciliation,
)
from .policy import (
    LeafStats,
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
from .evaluation import (
    BootstrapConfig,
    BootstrapSummary,
    Candidate,
    EvaluationError,
    EvaluationReport,
    NodeAnalysisRow,
    bootstrap_improvement,
    concordance,
    counterfactual_evaluation,
    model_selection,
    node_analysis,
    subgroup_evaluation,
    tree_signature,
)
from .synth import (
    Condition,
    Marginal,
    Region,
    SyntheticSpec,
    SynthError,
    TruthBundle,
    generate,
    oracle_reward,
    policy_true_value,
    tavr_like_preset,
)
