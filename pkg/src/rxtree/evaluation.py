"""Policy evaluation and model selection.

Two complementary estimates of a tree's value on a cohort:

* node analysis -- assume each leaf's members would exhibit the outcome rate
  observed among the leaf members who actually received the prescribed
  treatment (no counterfactual model involved);
* counterfactual evaluation -- average the reward matrix entries of the
  prescribed arms.

Both express results as a percent improvement over the cohort's historical
outcome rate, and both feed the bootstrap confidence intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import Cohort, SplitSpec, impute, make_rng, split
from .counterfactual import CounterfactualConfig, RewardMatrix, fit_reward
from .policy import OptConfig, PolicyTree, fit_policy_tree, route_cohort


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class NodeAnalysisRow:
    leaf_id: int
    prescription: str
    n_members: int
    counts: tuple[int, ...]  # recipients per treatment, treatment order
    rates: tuple[Optional[float], ...]  # historical outcome rate per treatment
    leaf_policy_rate: float  # rate attributed to this leaf's members
    fallback: bool  # True when the prescribed arm had no recipients


@dataclass(frozen=True)
class EvaluationReport:
    method: str  # "node_analysis" | "counterfactual"
    n: int
    historical_rate: float
    policy_rate: float
    percent_improvement: Optional[float]
    rows: tuple[NodeAnalysisRow, ...] = ()
    fallback_leaves: tuple[int, ...] = ()


def _improvement(historical: float, policy: float) -> Optional[float]:
    if historical <= 0:
        return None
    return 100.0 * (historical - policy) / historical


def _leaf_setup(tree: PolicyTree, cohort: Cohort):
    leaf_ids = route_cohort(tree, cohort)
    leaves = sorted({n.id for n in tree.leaves})
    slot_of = {leaf: k for k, leaf in enumerate(leaves)}
    slots = np.array([slot_of[int(l)] for l in leaf_ids], dtype=np.intp)
    arms = np.array([tree.by_id[leaf].prescription for leaf in leaves], dtype=np.intp)
    return slots, leaves, arms


def _node_policy_rate(
    slots: np.ndarray,
    t_idx: np.ndarray,
    y: np.ndarray,
    n_leaves: int,
    leaf_arms: np.ndarray,
    n_t: int,
):
    """Leaf-weighted policy rate plus the per-leaf pieces.

    Leaves whose prescribed arm has no recipients fall back to the leaf's
    overall historical rate.
    """
    members = np.bincount(slots, minlength=n_leaves).astype(float)
    flat = slots * n_t + t_idx
    recip = np.bincount(flat, minlength=n_leaves * n_t).reshape(n_leaves, n_t).astype(float)
    pos = np.bincount(flat, weights=y, minlength=n_leaves * n_t).reshape(n_leaves, n_t)
    sel = np.arange(n_leaves)
    got = recip[sel, leaf_arms]
    with np.errstate(invalid="ignore", divide="ignore"):
        prescribed_rate = pos[sel, leaf_arms] / got
        overall_rate = pos.sum(axis=1) / members
    fallback = (got == 0) & (members > 0)
    leaf_rate = np.where(fallback, overall_rate, prescribed_rate)
    occupied = members > 0
    total = float((members[occupied] * leaf_rate[occupied]).sum())
    n = float(members.sum())
    return total / n, members, recip, pos, fallback


def node_analysis(tree: PolicyTree, cohort: Cohort) -> EvaluationReport:
    """Leaf-level comparison against the observed standard of care."""
    slots, leaves, arms = _leaf_setup(tree, cohort)
    y = cohort.outcomes
    t_idx = cohort.treatment_idx
    n_t = len(cohort.treatments)
    policy_rate, members, recip, pos, fallback = _node_policy_rate(
        slots, t_idx, y, len(leaves), arms, n_t
    )
    historical = float(y.mean())

    rows = []
    fallback_ids = []
    for k, leaf in enumerate(leaves):
        rates = tuple(
            float(pos[k, t] / recip[k, t]) if recip[k, t] > 0 else None for t in range(n_t)
        )
        if fallback[k]:
            leaf_rate = float(pos[k].sum() / members[k]) if members[k] else 0.0
            fallback_ids.append(leaf)
        else:
            leaf_rate = rates[arms[k]] if members[k] else 0.0
        rows.append(
            NodeAnalysisRow(
                leaf_id=leaf,
                prescription=cohort.treatments.treatments[arms[k]],
                n_members=int(members[k]),
                counts=tuple(int(c) for c in recip[k]),
                rates=rates,
                leaf_policy_rate=float(leaf_rate if leaf_rate is not None else 0.0),
                fallback=bool(fallback[k]),
            )
        )
    return EvaluationReport(
        method="node_analysis",
        n=cohort.n,
        historical_rate=historical,
        policy_rate=float(policy_rate),
        percent_improvement=_improvement(historical, policy_rate),
        rows=tuple(rows),
        fallback_leaves=tuple(fallback_ids),
    )


def counterfactual_evaluation(
    tree: PolicyTree, cohort: Cohort, reward: RewardMatrix
) -> EvaluationReport:
    """Policy value under the reward matrix: mean reward of the prescribed arms."""
    if reward.values.shape[0] != cohort.n:
        raise EvaluationError("reward rows do not align with the cohort")
    slots, leaves, arms = _leaf_setup(tree, cohort)
    selected = reward.values[np.arange(cohort.n), arms[slots]]
    historical = float(cohort.outcomes.mean())
    policy = float(selected.mean())
    return EvaluationReport(
        method="counterfactual",
        n=cohort.n,
        historical_rate=historical,
        policy_rate=policy,
        percent_improvement=_improvement(historical, policy),
    )


@dataclass(frozen=True)
class BootstrapConfig:
    n_iterations: int = 1000
    sample_fraction: float = 0.95
    with_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_iterations < 1:
            raise EvaluationError("n_iterations must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise EvaluationError("sample_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class MethodSummary:
    mean: Optional[float]
    lo: Optional[float]  # 2.5th percentile
    hi: Optional[float]  # 97.5th percentile
    draws: tuple[float, ...]
    n_excluded: int


@dataclass(frozen=True)
class BootstrapSummary:
    node_analysis: MethodSummary
    counterfactual: MethodSummary


def _summarize(draws: list[float], n_excluded: int) -> MethodSummary:
    if not draws:
        return MethodSummary(None, None, None, (), n_excluded)
    arr = np.array(draws)
    return MethodSummary(
        mean=float(arr.mean()),
        lo=float(np.percentile(arr, 2.5)),
        hi=float(np.percentile(arr, 97.5)),
        draws=tuple(float(d) for d in arr),
        n_excluded=n_excluded,
    )


def bootstrap_improvement(
    tree: PolicyTree, cohort: Cohort, reward: RewardMatrix, config: BootstrapConfig
) -> BootstrapSummary:
    """Percent-improvement distribution over seeded resamples, by both methods.

    Draws whose resample has no historical positives have an undefined
    improvement; they are excluded and counted.
    """
    slots, leaves, arms = _leaf_setup(tree, cohort)
    y = cohort.outcomes
    t_idx = cohort.treatment_idx
    n_t = len(cohort.treatments)
    gamma_sel = reward.values[np.arange(cohort.n), arms[slots]]
    n = cohort.n
    m = max(1, int(round(config.sample_fraction * n)))
    rng = make_rng(config.seed)

    na_draws: list[float] = []
    ce_draws: list[float] = []
    excluded = 0
    for _ in range(config.n_iterations):
        idx = rng.choice(n, size=m, replace=config.with_replacement)
        hist = float(y[idx].mean())
        if hist <= 0:
            excluded += 1
            continue
        na_rate, *_ = _node_policy_rate(slots[idx], t_idx[idx], y[idx], len(leaves), arms, n_t)
        na_draws.append(100.0 * (hist - na_rate) / hist)
        ce_draws.append(100.0 * (hist - float(gamma_sel[idx].mean())) / hist)
    return BootstrapSummary(
        node_analysis=_summarize(na_draws, excluded),
        counterfactual=_summarize(ce_draws, excluded),
    )


def concordance(a: PolicyTree, b: PolicyTree, cohort: Cohort) -> float:
    """Fraction of records for which both trees prescribe the same treatment."""
    arms_a = _leaf_setup(a, cohort)
    arms_b = _leaf_setup(b, cohort)
    names_a = np.array(a.treatments.treatments)[arms_a[2][arms_a[0]]]
    names_b = np.array(b.treatments.treatments)[arms_b[2][arms_b[0]]]
    return float((names_a == names_b).mean())


@dataclass(frozen=True)
class SubgroupRow:
    label: str
    lo: Optional[float]
    hi: Optional[float]
    n: int
    report: Optional[EvaluationReport]  # None when the bin is empty


def subgroup_evaluation(
    tree: PolicyTree,
    cohort: Cohort,
    reward: RewardMatrix,
    feature: str,
    edges: Sequence[float],
) -> tuple[SubgroupRow, ...]:
    """Counterfactual evaluation restricted to bins of a numeric feature.

    ``edges`` are interior boundaries; k edges partition the cohort into k+1
    half-open bins [lo, hi).  Empty bins are reported, not dropped.
    """
    j = cohort.schema.index(feature)
    if cohort.schema[j].kind == "categorical":
        raise EvaluationError("subgroup feature must be numeric or binary")
    edges = list(edges)
    if sorted(edges) != edges or len(set(edges)) != len(edges):
        raise EvaluationError("edges must be strictly increasing")
    col = cohort.feature_matrix[:, j]
    bounds = [None, *edges, None]
    rows = []
    for k in range(len(edges) + 1):
        lo, hi = bounds[k], bounds[k + 1]
        mask = np.ones(cohort.n, dtype=bool)
        if lo is not None:
            mask &= col >= lo
        if hi is not None:
            mask &= col < hi
        label = f"[{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'})"
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            rows.append(SubgroupRow(label, lo, hi, 0, None))
            continue
        sub = cohort.subset(idx)
        sub_reward = RewardMatrix(reward.values[idx], reward.treatments, reward.provenance)
        rows.append(
            SubgroupRow(label, lo, hi, int(idx.size), counterfactual_evaluation(tree, sub, sub_reward))
        )
    return tuple(rows)


# ---------------------------------------------------------------------------
# multi-split model selection


def tree_signature(tree: PolicyTree):
    """Structural identity: split rules and prescriptions, ids ignored."""

    def sig(nid: int):
        node = tree.by_id[nid]
        if node.is_leaf:
            return ("leaf", tree.treatments.treatments[node.prescription])
        f = tree.schema[node.feature]
        rule = node.threshold if node.levels is None else tuple(node.levels)
        return ("split", f.name, rule, sig(node.left), sig(node.right))

    return sig(tree.root)


@dataclass(frozen=True)
class SplitReport:
    split_seed: int
    train_node_analysis: EvaluationReport
    test_node_analysis: EvaluationReport
    train_counterfactual: EvaluationReport
    test_counterfactual: EvaluationReport


@dataclass(frozen=True)
class Candidate:
    tree: PolicyTree
    reports: tuple[SplitReport, ...]

    @property
    def best_test_improvement(self) -> float:
        vals = [
            r.test_node_analysis.percent_improvement
            for r in self.reports
            if r.test_node_analysis.percent_improvement is not None
        ]
        return max(vals) if vals else float("-inf")


def model_selection(
    cohort: Cohort,
    n_splits: int,
    cf_config: CounterfactualConfig,
    opt_config: OptConfig,
    top_k: int,
    impute_method: str = "mean",
    seed: int = 0,
) -> tuple[Candidate, ...]:
    """Fit one tree per randomized 50/50 split, evaluate on that split's test
    side, rank by test node-analysis improvement, and collapse structurally
    identical trees before returning the top_k uniques."""
    if n_splits < 1:
        raise EvaluationError("n_splits must be >= 1")
    raw: dict = {}
    order: list = []
    for s in range(n_splits):
        split_seed = seed + s
        train_raw, test_raw = split(cohort, SplitSpec(0.5, split_seed))
        train = impute(train_raw, impute_method, fit_on=train_raw)
        test = impute(test_raw, impute_method, fit_on=train_raw)
        fit_train = fit_reward(train, replace(cf_config, seed=cf_config.seed + 2 * s))
        fit_test = fit_reward(test, replace(cf_config, seed=cf_config.seed + 2 * s + 1))
        tree = fit_policy_tree(
            train, fit_train.reward, replace(opt_config, seed=opt_config.seed + s),
            outcome=fit_train.outcome,
        )
        report = SplitReport(
            split_seed=split_seed,
            train_node_analysis=node_analysis(tree, train),
            test_node_analysis=node_analysis(tree, test),
            train_counterfactual=counterfactual_evaluation(tree, train, fit_train.reward),
            test_counterfactual=counterfactual_evaluation(tree, test, fit_test.reward),
        )
        key = tree_signature(tree)
        if key in raw:
            existing = raw[key]
            raw[key] = Candidate(existing.tree, existing.reports + (report,))
        else:
            raw[key] = Candidate(tree, (report,))
            order.append(key)
    candidates = sorted(
        (raw[k] for k in order), key=lambda c: -c.best_test_improvement
    )
    return tuple(candidates[:top_k])


# ---------------------------------------------------------------------------
# report rendering


def _fmt_rate(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.2f}%"


def render_node_analysis(report: EvaluationReport, label: str = "") -> str:
    """Aligned text table of per-leaf counts and historical rates."""
    treatments: list[str] = []
    if report.rows:
        n_t = len(report.rows[0].counts)
    else:
        n_t = 0
    header = ["node", "prescribed", "members"]
    for t in range(n_t):
        header += [f"n[arm{t}]", f"rate[arm{t}]"]
    lines = [f"{label} (n={report.n})" if label else f"n={report.n}"]
    table = [header]
    for row in report.rows:
        cells = [str(row.leaf_id), row.prescription, str(row.n_members)]
        for t in range(n_t):
            cells += [str(row.counts[t]), _fmt_rate(row.rates[t])]
        if row.fallback:
            cells[1] += " (fallback)"
        table.append(cells)
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    for r in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    lines.append(
        f"historical {_fmt_rate(report.historical_rate)}  policy {_fmt_rate(report.policy_rate)}"
        + (
            f"  improvement {report.percent_improvement:.2f}%"
            if report.percent_improvement is not None
            else "  improvement undefined"
        )
    )
    return "\n".join(lines) + "\n"


def render_improvement(reports: dict[str, EvaluationReport]) -> str:
    """Aligned text table: one labelled row per report."""
    table = [["", "historical rate", "policy rate", "percent improvement"]]
    for label, rep in reports.items():
        table.append(
            [
                label,
                _fmt_rate(rep.historical_rate),
                _fmt_rate(rep.policy_rate),
                f"{rep.percent_improvement:.2f}" if rep.percent_improvement is not None else "-",
            ]
        )
    widths = [max(len(r[c]) for r in table) for c in range(4)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in table) + "\n"
