"""Unit tests for the `workflow` module."""

import copy
import json

import pandas as pd
import pytest

from focuskit.enums import AggregatorKind, GroupBy, Split
from focuskit.exceptions import CheckpointMismatch
from focuskit.pipeline import SUMMARY_NAME
from focuskit.workflow import PROVENANCE_NAME, Workflow


@pytest.fixture(scope="module")
def workflow(small_config):
    yield Workflow(config=copy.deepcopy(small_config))


class TestGenerate:
    def test_provenance(self, cohort_dir, small_config):
        provenance = json.loads((cohort_dir / PROVENANCE_NAME).read_text())
        assert provenance["tool"] == "focuskit"
        assert provenance["seed"] == small_config.seed
        assert provenance["config"] == small_config.to_dict()

    def test_config_hash_is_stable(self, cohort_dir, workflow):
        provenance = json.loads((cohort_dir / PROVENANCE_NAME).read_text())
        assert provenance["config_hash"] == workflow.config_hash
        assert len(workflow.config_hash) == 64

    def test_is_reproducible(self, cohort_dir, workflow, tmp_path):
        workflow.generate(tmp_path)
        for name in ["manifest.json", PROVENANCE_NAME]:
            assert (tmp_path / name).read_bytes() == (cohort_dir / name).read_bytes()

    def test_different_seed_different_hash(self, small_config):
        config = copy.deepcopy(small_config)
        config.seed += 1
        assert Workflow(config=config).config_hash != Workflow(
            config=copy.deepcopy(small_config)
        ).config_hash


class TestTrain:
    def test_checkpoints_and_histories(self, models_dir):
        for name in ["quality", "abnormal", "disease"]:
            assert (models_dir / f"{name}.ckpt").exists()
            history = pd.read_csv(models_dir / f"{name}_history.csv")
            assert history["epoch"].tolist() == list(range(5))

    def test_single_stage(self, workflow, cohort_dir, tmp_path):
        outcomes = workflow.train(cohort_dir, output_dir=tmp_path, stage="quality")
        assert list(outcomes) == ["quality"]
        assert outcomes["quality"].checkpoint == tmp_path / "quality.ckpt"
        assert "slice AUC" in outcomes["quality"].headline

    def test_disease_needs_the_abnormal_checkpoint(
        self, workflow, cohort_dir, tmp_path
    ):
        with pytest.raises(CheckpointMismatch):
            workflow.train(cohort_dir, output_dir=tmp_path, stage="disease")

    def test_unknown_stage(self, workflow, cohort_dir, tmp_path):
        with pytest.raises(ValueError):
            workflow.train(cohort_dir, output_dir=tmp_path, stage="triage")


class TestInferAndEvaluate:
    @pytest.fixture(scope="class")
    def infer_dir(self, workflow, models_dir, cohort_dir, tmp_path_factory):
        directory = tmp_path_factory.mktemp("infer")
        workflow.infer(models_dir, data_dir=cohort_dir, output_dir=directory)
        yield directory

    @pytest.fixture(scope="class")
    def evaluation(self, workflow, infer_dir, cohort_dir):
        yield workflow.evaluate(infer_dir, truth_path=cohort_dir)

    def test_one_report_per_test_patient(self, infer_dir, cohort):
        reports = sorted(path.stem for path in (infer_dir / "reports").glob("*.json"))
        expected = sorted(bag.patient_id for bag in cohort.by_split(Split.TEST))
        assert reports == expected

    def test_status_counts_agree(self, infer_dir, evaluation):
        summary = json.loads((infer_dir / SUMMARY_NAME).read_text())
        assert evaluation.status_counts == summary["status_counts"]

    def test_summaries(self, evaluation):
        assert "gradability" in evaluation.summaries
        assert evaluation.n_reports == sum(evaluation.status_counts.values())

    def test_group_by_center(self, workflow, infer_dir, cohort_dir, tmp_path):
        evaluation = workflow.evaluate(
            infer_dir,
            truth_path=cohort_dir,
            output_dir=tmp_path,
            group_by=GroupBy.CENTER,
        )
        assert len(evaluation.summaries["gradability"].groups) > 0
        assert (tmp_path / "eval_summary.json").exists()


class TestAblate:
    def test_writes_the_table(self, workflow, cohort_dir, tmp_path):
        table = workflow.ablate(
            cohort_dir,
            kinds=[AggregatorKind.MEAN, AggregatorKind.MAX],
            output_dir=tmp_path,
            seeds=[1, 2],
        )
        assert list(table.columns) == ["seed", "kind", "patient_auc", "macro_f1"]
        assert table["seed"].tolist() == [1, 1, 2, 2]
        written = pd.read_csv(tmp_path / "ablation.csv")
        assert written["kind"].tolist() == ["mean", "max", "mean", "max"]

    def test_does_not_change_the_config(self, workflow, cohort_dir):
        seed = workflow.config.train["abnormal"].seed
        workflow.ablate(cohort_dir, kinds=[AggregatorKind.MEAN], seeds=[seed + 5])
        assert workflow.config.train["abnormal"].seed == seed
