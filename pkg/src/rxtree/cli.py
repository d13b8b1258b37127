"""Command-line entry point.

Subcommands: ``synth`` (generate a ground-truth cohort), ``pipeline``
(impute, split, estimate rewards, fit the tree, evaluate), ``select``
(multi-split model selection), ``evaluate`` (apply an exported tree to a
cohort, e.g. external validation), and ``export-calculator`` (tree JSON plus
parity fixtures for the web calculator).

Every run writes a ``manifest.json`` echoing the resolved configuration and
seeds; artifacts are built in a temporary directory and renamed into place so
a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import counterfactual as cf
from . import data as data_mod
from . import evaluation as ev
from . import learners
from . import policy as pol
from . import synth as synth_mod
from .data import Cohort, LoadError, SplitSpec


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


class ArtifactDir:
    """Write-temp-then-rename artifact directory."""

    def __init__(self, target: Path):
        self.target = target
        self.tmp = target.parent / (target.name + ".partial")

    def __enter__(self) -> Path:
        if self.target.exists():
            raise CliError(f"output directory already exists: {self.target}", exit_code=2)
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.tmp.rename(self.target)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _load_inputs(cohort_path: str, config_path: str) -> Cohort:
    config = Path(config_path)
    if not config.exists():
        raise CliError(f"schema config not found: {config}", exit_code=2)
    cohort_file = Path(cohort_path)
    if not cohort_file.exists():
        raise CliError(f"cohort file not found: {cohort_file}", exit_code=2)
    schema, treatments = data_mod.load_config(config)
    return data_mod.load_cohort(cohort_file, schema, treatments)


def _manifest(out: Path, command: str, config: dict) -> None:
    _write_json(out / "manifest.json", {
        "tool": "rxtree",
        "version": __version__,
        "command": command,
        "config": config,
    })


def _improvement_csv(path: Path, reports: dict[str, ev.EvaluationReport]) -> None:
    rows = [["set", "historical_rate", "policy_rate", "percent_improvement"]]
    for label, rep in reports.items():
        rows.append([
            label,
            f"{rep.historical_rate:.6f}",
            f"{rep.policy_rate:.6f}",
            "" if rep.percent_improvement is None else f"{rep.percent_improvement:.4f}",
        ])
    _write_csv(path, rows)


def _node_analysis_csv(path: Path, report: ev.EvaluationReport, treatments) -> None:
    header = ["node", "prescription", "n_members"]
    for t in treatments:
        header += [f"n_{t}", f"rate_{t}"]
    header += ["leaf_policy_rate", "fallback"]
    rows = [header]
    for row in report.rows:
        cells = [row.leaf_id, row.prescription, row.n_members]
        for k in range(len(treatments)):
            cells += [row.counts[k], "" if row.rates[k] is None else f"{row.rates[k]:.6f}"]
        cells += [f"{row.leaf_policy_rate:.6f}", int(row.fallback)]
        rows.append(cells)
    _write_csv(path, rows)


def _reconciliation_csv(path: Path, rows) -> None:
    out = [["node", "treatment", "n_members", "estimated_rate", "n_recipients", "historical_rate"]]
    for r in rows:
        out.append([
            r.leaf_id, r.treatment, r.n_members, f"{r.estimated_rate:.6f}", r.n_recipients,
            "" if r.historical_rate is None else f"{r.historical_rate:.6f}",
        ])
    _write_csv(path, out)


def _importance_csv(path: Path, names, vectors) -> None:
    mean = np.mean(np.stack(vectors), axis=0)
    rows = [["feature", "importance"]]
    for name, v in zip(names, mean):
        rows.append([name, f"{v:.6f}"])
    _write_csv(path, rows)


def _calibration_csv(path: Path, points) -> None:
    rows = [["mean_score", "observed_rate", "count"]]
    for ms, orate, cnt in points:
        rows.append([f"{ms:.6f}", f"{orate:.6f}", cnt])
    _write_csv(path, rows)


def _bootstrap_csv(path: Path, summary: ev.MethodSummary) -> None:
    rows = [["draw", "percent_improvement"]]
    for i, d in enumerate(summary.draws):
        rows.append([i, f"{d:.6f}"])
    _write_csv(path, rows)


def cmd_synth(args) -> int:
    if args.spec:
        spec = synth_mod.load_spec(args.spec)
        spec = replace(spec, n=args.n or spec.n, seed=args.seed if args.seed is not None else spec.seed)
    else:
        spec = synth_mod.tavr_like_preset(args.n or 2000, args.seed or 0)
    cohort, truth = synth_mod.generate(spec)
    with ArtifactDir(Path(args.out)) as out:
        data_mod.save_cohort(cohort, out / "cohort.csv")
        data_mod.save_config(cohort.schema, cohort.treatments, out / "config.json")
        synth_mod.save_spec(spec, out / "spec.json")
        _write_json(out / "truth.json", truth.to_doc(cohort.ids, cohort.treatments))
        _manifest(out, "synth", {
            "preset": None if args.spec else "tavr_like",
            "spec": str(args.spec) if args.spec else None,
            "n": spec.n,
            "seed": spec.seed,
        })
    return 0


def _cf_config(args, seed: int) -> cf.CounterfactualConfig:
    grid = cf.default_grid() if not args.quick_grid else (
        learners.EnsembleConfig(
            kind="boosted", n_estimators=80, learning_rate=0.1,
            base=learners.TreeLearnerConfig(max_depth=2, min_samples_leaf=10),
        ),
    )
    return cf.CounterfactualConfig(
        outcome_mode=args.outcome_mode,
        clip_floor=args.clip_floor,
        outcome_grid=grid,
        propensity_grid=grid,
        cv_folds=args.cv_folds,
        seed=seed,
    )


def _opt_config(args, seed: int) -> pol.OptConfig:
    return pol.OptConfig(
        max_depth=args.max_depth,
        min_samples_leaf=args.min_leaf,
        n_restarts=args.restarts,
        seed=seed,
    )


def _pipeline_config_echo(args) -> dict:
    return {
        "cohort": str(args.cohort),
        "config": str(args.config),
        "seed": args.seed,
        "impute": args.impute,
        "train_fraction": args.train_fraction,
        "outcome_mode": args.outcome_mode,
        "clip_floor": args.clip_floor,
        "cv_folds": args.cv_folds,
        "quick_grid": args.quick_grid,
        "max_depth": args.max_depth,
        "min_leaf": args.min_leaf,
        "restarts": args.restarts,
        "bootstrap": args.bootstrap,
    }


def run_pipeline(cohort: Cohort, args) -> dict:
    """Impute, split, estimate both reward matrices, fit the tree, evaluate.

    Returns everything the artifact writer (and tests) need, in memory.
    """
    seed = args.seed
    train_raw, test_raw = data_mod.split(cohort, SplitSpec(args.train_fraction, seed))
    train = data_mod.impute(train_raw, args.impute, fit_on=train_raw)
    test = data_mod.impute(test_raw, args.impute, fit_on=train_raw)

    fit_train = cf.fit_reward(train, _cf_config(args, seed * 10 + 1))
    fit_test = cf.fit_reward(test, _cf_config(args, seed * 10 + 2))
    tree = pol.fit_policy_tree(
        train, fit_train.reward, _opt_config(args, seed), outcome=fit_train.outcome
    )

    total = Cohort(cohort.schema, cohort.treatments, train.records + test.records)
    reports_na = {
        "total": ev.node_analysis(tree, total),
        "train": ev.node_analysis(tree, train),
        "test": ev.node_analysis(tree, test),
    }
    reports_ce = {
        "train": ev.counterfactual_evaluation(tree, train, fit_train.reward),
        "test": ev.counterfactual_evaluation(tree, test, fit_test.reward),
    }
    bootstrap = ev.bootstrap_improvement(
        tree, test, fit_test.reward,
        ev.BootstrapConfig(n_iterations=args.bootstrap, seed=seed),
    ) if args.bootstrap > 0 else None
    return {
        "train": train,
        "test": test,
        "fit_train": fit_train,
        "fit_test": fit_test,
        "tree": tree,
        "reports_na": reports_na,
        "reports_ce": reports_ce,
        "bootstrap": bootstrap,
    }


def cmd_pipeline(args) -> int:
    cohort = _load_inputs(args.cohort, args.config)
    result = run_pipeline(cohort, args)
    tree = result["tree"]
    train, test = result["train"], result["test"]
    fit_train, fit_test = result["fit_train"], result["fit_test"]
    treatments = cohort.treatments.treatments

    with ArtifactDir(Path(args.out)) as out:
        _manifest(out, "pipeline", _pipeline_config_echo(args))
        (out / "tree.json").write_text(pol.tree_to_json(tree), encoding="utf-8")

        for label, rep in result["reports_na"].items():
            _node_analysis_csv(out / f"node_analysis_{label}.csv", rep, treatments)
            (out / f"node_analysis_{label}.txt").write_text(
                ev.render_node_analysis(rep, label), encoding="utf-8"
            )
        _improvement_csv(out / "improvement_node_analysis.csv", result["reports_na"])
        _improvement_csv(out / "improvement_counterfactual.csv", result["reports_ce"])
        (out / "improvement.txt").write_text(
            "node analysis\n" + ev.render_improvement(result["reports_na"])
            + "\ncounterfactual evaluation\n" + ev.render_improvement(result["reports_ce"]),
            encoding="utf-8",
        )

        for label, side, fit in (("train", train, fit_train), ("test", test, fit_test)):
            _reconciliation_csv(
                out / f"leaf_reconciliation_{label}.csv",
                cf.leaf_rate_reconciliation(fit.outcome, tree, side),
            )
            cf.save_reward(fit.reward, side.ids, out / f"reward_{label}.csv")
            data_mod.save_cohort(side, out / f"cohort_{label}.csv")

        # cross-side calibration: each side's outcome model scored on the other
        # side's recipients of the same arm
        for label, fit, other in (("train", fit_train, test), ("test", fit_test, train)):
            X = other.feature_matrix
            single_model = len(fit.outcome.models) == 1 and len(treatments) > 1
            for t, tname in enumerate(treatments):
                rows = other.treatment_idx == t
                if not rows.any():
                    continue
                Xq = X[rows]
                if single_model:
                    Xq = np.column_stack([Xq, np.full(Xq.shape[0], float(t))])
                model = fit.outcome.models[0 if single_model else t]
                scores = model.predict_proba_matrix(Xq)
                points = learners.calibration_curve(other.outcomes[rows], scores, n_buckets=10, trim=0.05)
                _calibration_csv(out / f"calibration_{label}_{tname}.csv", points)

        names = cohort.schema.names
        for t, tname in enumerate(treatments):
            vectors = []
            for fit in (fit_train, fit_test):
                model = fit.outcome.models[min(t, len(fit.outcome.models) - 1)]
                imp = learners.feature_importance(model)
                vectors.append(imp[: len(names)] if imp.size >= len(names) else np.zeros(len(names)))
            _importance_csv(out / f"feature_importance_outcome_{tname}.csv", names, vectors)
        prop_vectors = []
        for fit in (fit_train, fit_test):
            if fit.propensity.model is not None:
                prop_vectors.append(learners.feature_importance(fit.propensity.model))
        if prop_vectors:
            _importance_csv(out / "feature_importance_propensity.csv", names, prop_vectors)

        aucs = [["side", "propensity", *[f"outcome_{t}" for t in treatments]]]
        for label, fit in (("train", fit_train), ("test", fit_test)):
            aucs.append([
                label,
                "" if fit.propensity_auc is None else f"{fit.propensity_auc:.4f}",
                *["" if a is None else f"{a:.4f}" for a in fit.outcome_aucs],
            ])
        _write_csv(out / "estimator_auc.csv", aucs)

        if result["bootstrap"] is not None:
            bs = result["bootstrap"]
            _bootstrap_csv(out / "bootstrap_node_analysis.csv", bs.node_analysis)
            _bootstrap_csv(out / "bootstrap_counterfactual.csv", bs.counterfactual)
            rows = [["method", "mean", "p2.5", "p97.5", "n_excluded"]]
            for name, s in (("node_analysis", bs.node_analysis), ("counterfactual", bs.counterfactual)):
                rows.append([
                    name,
                    "" if s.mean is None else f"{s.mean:.4f}",
                    "" if s.lo is None else f"{s.lo:.4f}",
                    "" if s.hi is None else f"{s.hi:.4f}",
                    s.n_excluded,
                ])
            _write_csv(out / "bootstrap_summary.csv", rows)
    return 0


def cmd_select(args) -> int:
    cohort = _load_inputs(args.cohort, args.config)
    candidates = ev.model_selection(
        cohort,
        n_splits=args.n_splits,
        cf_config=_cf_config(args, args.seed),
        opt_config=_opt_config(args, args.seed),
        top_k=args.top_k,
        impute_method=args.impute,
        seed=args.seed,
    )
    with ArtifactDir(Path(args.out)) as out:
        _manifest(out, "select", {
            **_pipeline_config_echo(args),
            "n_splits": args.n_splits,
            "top_k": args.top_k,
        })
        ranking = [["rank", "directory", "n_splits_represented", "best_test_improvement"]]
        for rank, cand in enumerate(candidates, start=1):
            sub = out / f"candidate_{rank:02d}"
            sub.mkdir()
            (sub / "tree.json").write_text(pol.tree_to_json(cand.tree), encoding="utf-8")
            rows = [[
                "split_seed",
                "train_na_improvement", "test_na_improvement",
                "train_ce_improvement", "test_ce_improvement",
            ]]
            for rep in cand.reports:
                rows.append([
                    rep.split_seed,
                    *[
                        "" if r.percent_improvement is None else f"{r.percent_improvement:.4f}"
                        for r in (
                            rep.train_node_analysis, rep.test_node_analysis,
                            rep.train_counterfactual, rep.test_counterfactual,
                        )
                    ],
                ])
            _write_csv(sub / "split_reports.csv", rows)
            ranking.append([
                rank, sub.name, len(cand.reports), f"{cand.best_test_improvement:.4f}",
            ])
        _write_csv(out / "ranking.csv", ranking)
    return 0


def cmd_evaluate(args) -> int:
    cohort = _load_inputs(args.cohort, args.config)
    tree_path = Path(args.tree)
    if not tree_path.exists():
        raise CliError(f"tree file not found: {tree_path}", exit_code=2)
    tree = pol.import_tree(tree_path.read_text(encoding="utf-8"))
    for j in tree.used_features:
        name = tree.schema[j].name
        if name not in cohort.schema.names:
            raise CliError(f"cohort is missing feature {name!r} required by the tree", exit_code=2)
    if cohort.has_missing:
        cohort = data_mod.impute(cohort, args.impute, fit_on=cohort)
    report = ev.node_analysis(tree, cohort)
    ce_report = None
    if args.reward:
        reward = cf.load_reward(args.reward, cohort.treatments, cohort.ids)
        ce_report = ev.counterfactual_evaluation(tree, cohort, reward)
    with ArtifactDir(Path(args.out)) as out:
        _manifest(out, "evaluate", {
            "tree": str(args.tree),
            "cohort": str(args.cohort),
            "config": str(args.config),
            "reward": str(args.reward) if args.reward else None,
            "impute": args.impute,
        })
        _node_analysis_csv(out / "node_analysis.csv", report, cohort.treatments.treatments)
        (out / "node_analysis.txt").write_text(
            ev.render_node_analysis(report, "cohort"), encoding="utf-8"
        )
        reports = {"node_analysis": report}
        if ce_report is not None:
            reports["counterfactual"] = ce_report
        _improvement_csv(out / "improvement.csv", reports)
    return 0


def _parity_cases(tree: pol.PolicyTree, n_cases: int, seed: int) -> list[dict]:
    rng = data_mod.make_rng(seed, 52121)
    doc_schema = [tree.schema[j] for j in range(len(tree.schema))]
    bounds = tree.bounds or tuple(None for _ in doc_schema)

    def random_value(j: int):
        f = doc_schema[j]
        if f.kind == data_mod.BINARY:
            return float(rng.integers(2))
        if f.kind == data_mod.CATEGORICAL:
            return f.levels[int(rng.integers(len(f.levels)))]
        lo, hi = bounds[j] if bounds[j] is not None else (0.0, 1.0)
        if lo == hi:
            hi = lo + 1.0
        return float(np.round(rng.uniform(lo, hi), 6))

    thresholds = [
        (node.feature, node.threshold)
        for node in tree.nodes
        if not node.is_leaf and node.threshold is not None
    ]
    cases = []
    for i in range(n_cases):
        values = [random_value(j) for j in range(len(doc_schema))]
        # ensure boundary hits are exercised: pin one split feature to its threshold
        if thresholds and i % 5 == 0:
            f, th = thresholds[(i // 5) % len(thresholds)]
            values[f] = th
        prescription, leaf_id, stats = pol.prescribe(tree, values)
        risks = {}
        if stats is not None:
            for k, t in enumerate(tree.treatments.treatments):
                risks[t] = {
                    "historical_rate": stats.historical_rates[k],
                    "mean_estimate": stats.mean_estimates[k],
                }
        cases.append({
            "inputs": {doc_schema[j].name: values[j] for j in range(len(doc_schema))},
            "prescription": prescription,
            "leaf_id": leaf_id,
            "risks": risks,
        })
    return cases


def cmd_export_calculator(args) -> int:
    tree_path = Path(args.tree)
    if not tree_path.exists():
        raise CliError(f"tree file not found: {tree_path}", exit_code=2)
    tree_text = tree_path.read_text(encoding="utf-8")
    tree = pol.import_tree(tree_text)
    cases = _parity_cases(tree, args.parity, args.seed)
    with ArtifactDir(Path(args.out)) as out:
        _manifest(out, "export-calculator", {
            "tree": str(args.tree),
            "parity": args.parity,
            "seed": args.seed,
            "ui_dir": str(args.ui_dir) if args.ui_dir else None,
        })
        (out / "tree.json").write_text(tree_text, encoding="utf-8")
        _write_json(out / "parity.json", {"tree": "tree.json", "cases": cases})
        if args.ui_dir:
            ui = Path(args.ui_dir)
            if not ui.is_dir():
                raise CliError(f"UI bundle directory not found: {ui}", exit_code=2)
            for item in sorted(ui.rglob("*")):
                rel = item.relative_to(ui)
                dest = out / "ui" / rel
                if item.is_dir():
                    dest.mkdir(parents=True, exist_ok=True)
                else:
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(item, dest)
    return 0


def _add_common_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--impute", default="mean", choices=["mean", "conditional_mean", "forest"])
    p.add_argument("--train-fraction", type=float, default=0.5, dest="train_fraction")
    p.add_argument("--outcome-mode", default="per_treatment",
                   choices=["per_treatment", "single_with_treatment_feature"], dest="outcome_mode")
    p.add_argument("--clip-floor", type=float, default=0.05, dest="clip_floor")
    p.add_argument("--cv-folds", type=int, default=5, dest="cv_folds")
    p.add_argument("--quick-grid", action="store_true", dest="quick_grid",
                   help="single boosted config instead of the cross-validated grid")
    p.add_argument("--max-depth", type=int, default=8, dest="max_depth")
    p.add_argument("--min-leaf", type=int, default=50, dest="min_leaf")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--bootstrap", type=int, default=1000,
                   help="bootstrap iterations on the test side (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxtree", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rxtree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with ground truth")
    p.add_argument("--preset", default="tavr", choices=["tavr"])
    p.add_argument("--spec", default=None, help="generator spec JSON (overrides --preset)")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="full train/evaluate pipeline on one cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_common_model_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("select", help="model selection across randomized splits")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-splits", type=int, default=20, dest="n_splits")
    p.add_argument("--top-k", type=int, default=3, dest="top_k")
    _add_common_model_args(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="apply an exported tree to a cohort")
    p.add_argument("--tree", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reward", default=None, help="reward CSV enabling counterfactual evaluation")
    p.add_argument("--impute", default="mean", choices=["mean", "conditional_mean", "forest"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-calculator", help="bundle a tree for the web calculator")
    p.add_argument("--tree", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parity", type=int, default=100, help="number of parity cases to generate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui-dir", default=None, dest="ui_dir", help="built static UI to copy alongside")
    p.set_defaults(func=cmd_export_calculator)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"rxtree: {e}", file=sys.stderr)
        return e.exit_code
    except (LoadError, data_mod.CohortError, cf.CounterfactualError, pol.PolicyError,
            ev.EvaluationError, synth_mod.SynthError, learners.LearnerError) as e:
        print(f"rxtree: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
