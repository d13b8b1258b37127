import csv
import json

import pytest

from rxtree.cli import main
from rxtree import policy as pol


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "cohort"
    assert run(["synth", "--preset", "tavr", "--n", "500", "--seed", "5", "--out", out]) == 0
    return out


def pipeline_args(synth_dir, out, seed=3, bootstrap=25):
    return [
        "pipeline",
        "--cohort", synth_dir / "cohort.csv",
        "--config", synth_dir / "config.json",
        "--out", out,
        "--seed", seed,
        "--quick-grid",
        "--max-depth", 2,
        "--min-leaf", 60,
        "--restarts", 3,
        "--bootstrap", bootstrap,
    ]


class TestSynthCommand:
    def test_artifacts(self, synth_dir):
        names = {p.name for p in synth_dir.iterdir()}
        assert {"cohort.csv", "config.json", "truth.json", "spec.json", "manifest.json"} <= names
        rows = list(csv.reader((synth_dir / "cohort.csv").open()))
        assert len(rows) == 501  # header + records
        truth = json.loads((synth_dir / "truth.json").read_text())
        assert len(truth["records"]) == 500
        assert "probabilities" in truth["records"][0]

    def test_deterministic(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run(["synth", "--n", "300", "--seed", "9", "--out", a]) == 0
        assert run(["synth", "--n", "300", "--seed", "9", "--out", b]) == 0
        assert (a / "cohort.csv").read_bytes() == (b / "cohort.csv").read_bytes()
        assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()

    def test_refuses_existing_dir(self, tmp_path, capsys):
        out = tmp_path / "dup"
        assert run(["synth", "--n", "300", "--seed", "1", "--out", out]) == 0
        assert run(["synth", "--n", "300", "--seed", "1", "--out", out]) == 2
        assert "exists" in capsys.readouterr().err


class TestPipelineCommand:
    def test_artifacts_present(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        assert run(pipeline_args(synth_dir, out)) == 0
        names = {p.name for p in out.iterdir()}
        expected = {
            "manifest.json", "tree.json",
            "node_analysis_total.csv", "node_analysis_train.csv", "node_analysis_test.csv",
            "node_analysis_total.txt", "node_analysis_train.txt", "node_analysis_test.txt",
            "improvement_node_analysis.csv", "improvement_counterfactual.csv", "improvement.txt",
            "leaf_reconciliation_train.csv", "leaf_reconciliation_test.csv",
            "reward_train.csv", "reward_test.csv",
            "cohort_train.csv", "cohort_test.csv",
            "estimator_auc.csv",
            "bootstrap_node_analysis.csv", "bootstrap_counterfactual.csv", "bootstrap_summary.csv",
        }
        assert expected <= names
        assert any(n.startswith("calibration_") for n in names)
        assert any(n.startswith("feature_importance_outcome_") for n in names)
        tree = pol.import_tree((out / "tree.json").read_text())
        assert tree.treatments.treatments == ("Sapien", "Evolut")

    def test_byte_identical_reruns(self, synth_dir, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run(pipeline_args(synth_dir, a)) == 0
        assert run(pipeline_args(synth_dir, b)) == 0
        for name in ("tree.json", "improvement_node_analysis.csv", "bootstrap_summary.csv",
                     "node_analysis_test.csv", "reward_train.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_missing_schema_exits_2(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = run([
            "pipeline", "--cohort", synth_dir / "cohort.csv",
            "--config", tmp_path / "nope.json", "--out", out,
        ])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err
        assert not out.exists()

    def test_failed_run_leaves_nothing(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        args = pipeline_args(synth_dir, out)
        args[args.index("--min-leaf") + 1] = -1  # invalid config
        assert run(args) != 0
        assert not out.exists()
        assert not (tmp_path / "run.partial").exists()


class TestEvaluateCommand:
    def test_consistency_with_pipeline(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run(pipeline_args(synth_dir, run_dir, bootstrap=0)) == 0
        out = tmp_path / "eval"
        assert run([
            "evaluate", "--tree", run_dir / "tree.json",
            "--cohort", synth_dir / "cohort.csv",
            "--config", synth_dir / "config.json",
            "--out", out,
        ]) == 0
        # the full cohort is train+test combined, so node analysis must match
        # the pipeline's "total" aggregate
        with (out / "improvement.csv").open() as fh:
            eval_row = {r[0]: r for r in csv.reader(fh)}
        with (run_dir / "improvement_node_analysis.csv").open() as fh:
            pipe_row = {r[0]: r for r in csv.reader(fh)}
        assert eval_row["node_analysis"][1:] == pipe_row["total"][1:]

    def test_reward_csv_enables_ce(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run(pipeline_args(synth_dir, run_dir, bootstrap=0)) == 0
        # decoupled path: the test-side cohort plus its saved reward reproduce
        # the pipeline's counterfactual report exactly
        out = tmp_path / "eval"
        assert run([
            "evaluate", "--tree", run_dir / "tree.json",
            "--cohort", run_dir / "cohort_test.csv",
            "--config", synth_dir / "config.json",
            "--reward", run_dir / "reward_test.csv",
            "--out", out,
        ]) == 0
        with (out / "improvement.csv").open() as fh:
            got = {r[0]: r for r in csv.reader(fh)}
        with (run_dir / "improvement_counterfactual.csv").open() as fh:
            pipe = {r[0]: r for r in csv.reader(fh)}
        assert got["counterfactual"][1:] == pipe["test"][1:]

    def test_misaligned_reward_rejected(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run(pipeline_args(synth_dir, run_dir, bootstrap=0)) == 0
        code = run([
            "evaluate", "--tree", run_dir / "tree.json",
            "--cohort", synth_dir / "cohort.csv",
            "--config", synth_dir / "config.json",
            "--reward", run_dir / "reward_train.csv",
            "--out", tmp_path / "eval",
        ])
        assert code == 1

    def test_missing_feature_exits_2(self, synth_dir, tmp_path, capsys):
        doc = {
            "version": 1,
            "schema": [{"name": "not_in_cohort", "kind": "numeric"}],
            "treatments": ["Sapien", "Evolut"],
            "root": 1,
            "nodes": [
                {"id": 1, "kind": "split", "feature": "not_in_cohort", "threshold": 0.5,
                 "left": 2, "right": 3},
                {"id": 2, "kind": "leaf", "prescription": "Sapien", "n_train": 0},
                {"id": 3, "kind": "leaf", "prescription": "Evolut", "n_train": 0},
            ],
        }
        tree_path = tmp_path / "tree.json"
        tree_path.write_text(json.dumps(doc))
        code = run([
            "evaluate", "--tree", tree_path,
            "--cohort", synth_dir / "cohort.csv",
            "--config", synth_dir / "config.json",
            "--out", tmp_path / "eval",
        ])
        assert code == 2
        assert "not_in_cohort" in capsys.readouterr().err


class TestSelectCommand:
    def test_candidates_and_ranking(self, synth_dir, tmp_path):
        out = tmp_path / "select"
        assert run([
            "select", "--cohort", synth_dir / "cohort.csv",
            "--config", synth_dir / "config.json",
            "--out", out, "--seed", 2,
            "--n-splits", 2, "--top-k", 2,
            "--quick-grid", "--max-depth", 1, "--min-leaf", 60, "--restarts", 2,
        ]) == 0
        dirs = [p for p in out.iterdir() if p.is_dir()]
        assert 1 <= len(dirs) <= 2
        with (out / "ranking.csv").open() as fh:
            rows = list(csv.reader(fh))[1:]
        values = [float(r[3]) for r in rows]
        assert values == sorted(values, reverse=True)
        for d in dirs:
            assert (d / "tree.json").exists()
            assert (d / "split_reports.csv").exists()


class TestExportCalculator:
    def test_parity_file(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run(pipeline_args(synth_dir, run_dir, bootstrap=0)) == 0
        out = tmp_path / "calc"
        assert run([
            "export-calculator", "--tree", run_dir / "tree.json",
            "--out", out, "--parity", 40, "--seed", 1,
        ]) == 0
        parity = json.loads((out / "parity.json").read_text())
        assert len(parity["cases"]) == 40
        tree = pol.import_tree((out / "tree.json").read_text())
        names = [f.name for f in tree.schema.features]
        for case in parity["cases"]:
            values = [case["inputs"][n] for n in names]
            treatment, leaf, _ = pol.prescribe(tree, values)
            assert treatment == case["prescription"]
            assert leaf == case["leaf_id"]

    def test_ui_dir_copied(self, synth_dir, tmp_path):
        run_dir = tmp_path / "run"
        assert run(pipeline_args(synth_dir, run_dir, bootstrap=0)) == 0
        ui = tmp_path / "ui_src"
        ui.mkdir()
        (ui / "index.html").write_text("<html></html>")
        out = tmp_path / "calc"
        assert run([
            "export-calculator", "--tree", run_dir / "tree.json",
            "--out", out, "--parity", 5, "--ui-dir", ui,
        ]) == 0
        assert (out / "ui" / "index.html").exists()
