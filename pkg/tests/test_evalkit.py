"""Unit tests for the `evalkit` module."""

import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from focuskit.datamodel import VolumeBag
from focuskit.enums import (
    AggregatorKind,
    DiseaseLabel,
    GroupBy,
    PipelineStatus,
    QualityLabel,
    Split,
)
from focuskit.evalkit import (
    ablation_aggregators,
    bootstrap_ci,
    confusion_and_f1,
    disease_scores,
    evaluate_run,
    evaluate_stage,
    roc_auc,
    roc_curve,
    summarise,
    write_roc_points,
)
from focuskit.exceptions import InvalidEvaluation, UndefinedAUC, UnmatchedPatient
from focuskit.pipeline import PipelineReport


def oracle_report(bag: VolumeBag) -> PipelineReport:
    """The report of a pipeline that always agrees with the ground truth."""
    fraction = float(bag.gradable_mask.mean())
    common = dict(
        patient_id=bag.patient_id,
        center_id=bag.center_id,
        n_slices=bag.n_slices,
        n_gradable=int(bag.gradable_mask.sum()),
        gradable_fraction=fraction,
    )
    if fraction < 0.5:
        return PipelineReport(
            status=PipelineStatus.UNGRADABLE, reason="gradable fraction", **common
        )
    if not bag.is_abnormal:
        return PipelineReport(
            status=PipelineStatus.NORMAL,
            reason="not abnormal",
            abnormal_probability=0.0,
            **common,
        )
    posterior = [0.0] * len(DiseaseLabel)
    posterior[bag.patient_disease.index] = 1.0
    return PipelineReport(
        status=PipelineStatus.DISEASED,
        reason=None,
        abnormal_probability=1.0,
        disease=bag.patient_disease,
        disease_posterior=posterior,
        **common,
    )


def one_center(bags: list[VolumeBag], center_id: str) -> list[VolumeBag]:
    return [dataclasses.replace(bag, center_id=center_id) for bag in bags]


@pytest.fixture(scope="module")
def oracle_reports(cohort):
    yield [oracle_report(bag) for bag in cohort]


@pytest.fixture(scope="module")
def oracle_evaluation(cohort, oracle_reports):
    yield evaluate_run(oracle_reports, cohort, group_by=GroupBy.CENTER)


class TestConfusionAndF1:
    def test_binary_example(self):
        result = confusion_and_f1([0, 1, 1, 0], [0, 1, 0, 0], n_classes=2)
        assert result.confusion.tolist() == [[2, 0], [1, 1]]
        np.testing.assert_allclose(result.f1, [0.8, 0.6667], atol=1e-4)
        assert result.macro_f1 == pytest.approx(0.7333, abs=1e-4)
        assert result.accuracy == 0.75

    def test_specificity(self):
        result = confusion_and_f1([0, 1, 1, 0], [0, 1, 0, 0], n_classes=2)
        np.testing.assert_allclose(result.specificity, [0.5, 1.0])

    def test_all_wrong_gives_zero(self):
        result = confusion_and_f1([0, 0, 1, 1], [1, 1, 0, 0], n_classes=2)
        assert result.macro_f1 == 0.0
        np.testing.assert_array_equal(result.precision, [0.0, 0.0])

    def test_absent_classes_do_not_count(self):
        result = confusion_and_f1([0, 2, 2], [0, 2, 2], n_classes=9)
        assert result.macro_f1 == 1.0

    def test_macro_f1_ignores_class_names(self):
        rng = np.random.default_rng(4)
        truth = rng.integers(0, 5, size=60)
        pred = np.where(rng.random(60) < 0.6, truth, rng.integers(0, 5, size=60))
        relabel = rng.permutation(5)
        original = confusion_and_f1(truth, pred, n_classes=5)
        relabelled = confusion_and_f1(relabel[truth], relabel[pred], n_classes=5)
        assert relabelled.macro_f1 == pytest.approx(original.macro_f1, abs=1e-12)
        np.testing.assert_allclose(relabelled.f1[relabel], original.f1, atol=1e-12)

    def test_empty(self):
        with pytest.raises(InvalidEvaluation):
            confusion_and_f1([], [], n_classes=2)

    def test_unequal_lengths(self):
        with pytest.raises(InvalidEvaluation):
            confusion_and_f1([0, 1], [0], n_classes=2)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidEvaluation):
            confusion_and_f1([0, 2], [0, 1], n_classes=2)


class TestRocAuc:
    def test_example(self):
        assert roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75

    def test_perfect_separation(self):
        assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.7, 0.9]) == 1.0

    def test_ties_count_half(self):
        assert roc_auc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(2, 201))
            truth = rng.integers(0, 2, size=n)
            truth[:2] = [0, 1]
            scores = rng.integers(0, 10, size=n) / 10
            positives, negatives = scores[truth == 1], scores[truth == 0]
            diffs = positives[:, None] - negatives[None, :]
            expected = (np.sum(diffs > 0) + 0.5 * np.sum(diffs == 0)) / diffs.size
            assert roc_auc(truth, scores) == pytest.approx(expected, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(UndefinedAUC):
            roc_auc([1, 1, 1], [0.2, 0.4, 0.9])

    def test_curve_endpoints(self):
        fpr, tpr, thresholds = roc_curve([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        assert (fpr[0], tpr[0], thresholds[0]) == (0.0, 0.0, np.inf)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0)
        assert np.all(np.diff(tpr) >= 0)

    def test_curve_area_matches_auc(self):
        rng = np.random.default_rng(5)
        truth = rng.integers(0, 2, size=40)
        scores = rng.random(40)
        fpr, tpr, _ = roc_curve(truth, scores)
        area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
        assert area == pytest.approx(roc_auc(truth, scores), abs=1e-12)

    def test_write_points(self, tmp_path):
        path = write_roc_points(
            tmp_path / "roc.csv", [0, 1, 0, 1], [0.2, 0.8, 0.3, 0.6]
        )
        assert list(pd.read_csv(path).columns) == ["fpr", "tpr", "threshold"]


class TestBootstrap:
    @staticmethod
    def macro_f1(truth, pred):
        return confusion_and_f1(truth, pred, n_classes=2).macro_f1

    def test_perfect_predictions(self):
        labels = [0, 1] * 10
        interval = bootstrap_ci(self.macro_f1, labels, labels, resamples=100)
        assert interval.as_tuple() == (1.0, 1.0)
        assert interval.point == 1.0

    def test_point_is_covered_in_seeded_trials(self):
        covered = list()
        for trial in range(100):
            rng = np.random.default_rng(trial)
            truth = np.repeat([0, 1], 20)
            scores = rng.normal(loc=truth, scale=1.0)
            interval = bootstrap_ci(roc_auc, truth, scores, resamples=100, seed=trial)
            covered.append(interval.lower <= interval.point <= interval.upper)
        assert np.mean(covered) >= 0.95

    def test_same_seed_same_interval(self):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, 2, size=25)
        pred = rng.integers(0, 2, size=25)
        first = bootstrap_ci(self.macro_f1, truth, pred, resamples=100, seed=3)
        second = bootstrap_ci(self.macro_f1, truth, pred, resamples=100, seed=3)
        assert first == second

    def test_undefined_resamples_are_skipped(self):
        truth = [1] + [0] * 9
        scores = np.linspace(1.0, 0.1, 10)
        interval = bootstrap_ci(roc_auc, truth, scores, resamples=200)
        assert interval.n_skipped > 0
        assert interval.point == 1.0

    def test_too_few_patients(self):
        with pytest.raises(InvalidEvaluation):
            bootstrap_ci(self.macro_f1, [0, 1] * 4, [0, 1] * 4)

    def test_no_resamples(self):
        with pytest.raises(InvalidEvaluation):
            bootstrap_ci(self.macro_f1, [0, 1] * 5, [0, 1] * 5, resamples=0)


class TestSummarise:
    def test_center_grouping_needs_centers(self):
        with pytest.raises(InvalidEvaluation):
            summarise(
                name="x",
                truth=[0, 1],
                pred=[0, 1],
                scores=None,
                class_names=["a", "b"],
                group_by=GroupBy.CENTER,
            )

    def test_group_names(self):
        summary = summarise(
            name="x",
            truth=[0, 1, 0, 1],
            pred=[0, 1, 1, 1],
            scores=None,
            class_names=["a", "b"],
            centers=["B", "A", "B", "A"],
            group_by=GroupBy.CENTER,
        )
        assert list(summary.groups) == ["A", "B"]
        assert summary.groups["A"].name == "x/A"

    def test_undefined_auc_is_none(self):
        summary = summarise(
            name="x",
            truth=[0, 0, 0],
            pred=[0, 0, 1],
            scores=np.array([[0.9, 0.1], [0.8, 0.2], [0.4, 0.6]]),
            class_names=["a", "b"],
        )
        assert summary.auc == dict(a=None, b=None)
        assert summary.macro_auc is None

    def test_small_groups_have_no_interval(self):
        summary = summarise(
            name="x",
            truth=[0, 1] * 3,
            pred=[0, 1] * 3,
            scores=None,
            class_names=["a", "b"],
            resamples=50,
        )
        assert summary.macro_f1_ci is None
        assert summary.to_dict()["macro_f1_ci"] is None

    def test_to_dict_without_groups(self):
        summary = summarise(
            name="x", truth=[0, 1], pred=[0, 1], scores=None, class_names=["a", "b"]
        )
        record = summary.to_dict()
        assert "groups" not in record
        assert record["per_class"]["b"]["f1"] == 1.0


class TestDiseaseScores:
    def test_diseased_report(self, oracle_reports):
        report = next(r for r in oracle_reports if r.status == PipelineStatus.DISEASED)
        scores = disease_scores(report)
        assert scores.shape == (9,)
        assert scores.sum() == pytest.approx(1.0)
        assert scores.argmax() == report.disease.index

    def test_normal_report_spreads_uniformly(self, oracle_reports):
        report = next(r for r in oracle_reports if r.status == PipelineStatus.NORMAL)
        report = dataclasses.replace(report, abnormal_probability=0.2)
        scores = disease_scores(report)
        assert scores[0] == pytest.approx(0.8)
        np.testing.assert_allclose(scores[1:], np.full(8, 0.2 / 8))

    def test_ungradable_report(self):
        report = PipelineReport(
            patient_id="P00000",
            center_id="C0",
            status=PipelineStatus.UNGRADABLE,
            reason="no gradable slices",
            n_slices=4,
            n_gradable=0,
            gradable_fraction=0.0,
        )
        with pytest.raises(InvalidEvaluation):
            disease_scores(report)


class TestEvaluateRun:
    def test_oracle_reports_score_perfectly(self, oracle_evaluation):
        for name in ["gradability", "abnormality", "disease"]:
            assert oracle_evaluation.summaries[name].macro_f1 == 1.0

    def test_oracle_abnormality_auc(self, oracle_evaluation):
        assert oracle_evaluation.summaries["abnormality"].macro_auc == 1.0

    def test_ungradable_reports_are_excluded(self, cohort, oracle_evaluation):
        n_ungradable = sum(bag.gradable_mask.mean() < 0.5 for bag in cohort)
        assert oracle_evaluation.n_excluded == n_ungradable
        assert oracle_evaluation.summaries["abnormality"].n == len(cohort) - (
            n_ungradable
        )
        assert oracle_evaluation.status_counts["Ungradable"] == n_ungradable

    def test_status_counts_add_up(self, cohort, oracle_evaluation):
        assert sum(oracle_evaluation.status_counts.values()) == len(cohort)

    def test_center_confusions_add_up(self, oracle_evaluation):
        summary = oracle_evaluation.summaries["disease"]
        total = sum(group.confusion for group in summary.groups.values())
        np.testing.assert_array_equal(total, summary.confusion)

    def test_single_center_group_equals_all(self, cohort):
        bags = one_center(list(cohort), "C0")
        evaluation = evaluate_run(
            [oracle_report(bag) for bag in bags], bags, group_by=GroupBy.CENTER
        )
        summary = evaluation.summaries["abnormality"]
        assert list(summary.groups) == ["C0"]
        group = summary.groups["C0"]
        np.testing.assert_array_equal(group.confusion, summary.confusion)
        assert group.macro_f1 == summary.macro_f1

    def test_wrong_prediction_is_counted(self, cohort, oracle_reports):
        idx, report = next(
            (idx, r)
            for idx, r in enumerate(oracle_reports)
            if r.status == PipelineStatus.NORMAL
        )
        reports = list(oracle_reports)
        reports[idx] = dataclasses.replace(
            report,
            status=PipelineStatus.DISEASED,
            abnormal_probability=0.9,
            disease=DiseaseLabel.AMD,
            disease_posterior=[0.0, 1.0] + [0.0] * 7,
        )
        evaluation = evaluate_run(reports, cohort)
        confusion = evaluation.summaries["disease"].confusion
        assert confusion[0, DiseaseLabel.AMD.index] == 1
        assert evaluation.summaries["abnormality"].macro_f1 < 1.0

    def test_unmatched_patient(self, cohort, oracle_reports):
        stranger = dataclasses.replace(oracle_reports[0], patient_id="P99999")
        with pytest.raises(UnmatchedPatient) as exc_info:
            evaluate_run([stranger], cohort)
        assert exc_info.value.patient_id == "P99999"

    def test_no_reports(self, cohort):
        with pytest.raises(InvalidEvaluation):
            evaluate_run([], cohort)

    def test_only_ungradable_reports(self, cohort):
        bag = cohort.bags[0]
        ungradable = dataclasses.replace(
            bag, slice_quality=(QualityLabel.UNGRADABLE,) * bag.n_slices
        )
        evaluation = evaluate_run([oracle_report(ungradable)], [ungradable])
        assert list(evaluation.summaries) == ["gradability"]
        assert evaluation.n_excluded == 1

    def test_to_dict(self, oracle_evaluation):
        record = oracle_evaluation.to_dict()
        assert set(record) == {
            "n_reports",
            "status_counts",
            "n_excluded_ungradable",
            "summaries",
        }
        assert "groups" in record["summaries"]["disease"]

    def test_write(self, oracle_evaluation, tmp_path):
        paths = oracle_evaluation.write(tmp_path)
        names = {path.name for path in paths}
        assert "eval_summary.json" in names
        assert "disease_per_class.csv" in names
        assert "abnormality_roc.csv" in names
        record = json.loads((tmp_path / "eval_summary.json").read_text())
        assert record["n_reports"] == oracle_evaluation.n_reports
        frame = pd.read_csv(tmp_path / "disease_per_class.csv")
        assert len(frame) == len(DiseaseLabel)


class TestEvaluateStage:
    def test_quality_is_slice_level(self, models, cohort):
        summaries = evaluate_stage(models.quality, cohort.by_split(Split.TEST))
        assert list(summaries) == ["slice"]
        assert summaries["slice"].class_names == ["Gradable", "Ungradable"]

    def test_abnormal_has_both_levels(self, models, cohort):
        bags = cohort.by_split(Split.TEST)
        summaries = evaluate_stage(models.abnormal, bags)
        assert list(summaries) == ["slice", "patient"]
        assert summaries["patient"].n == len(bags)

    def test_grouped_by_center(self, models, cohort):
        bags = cohort.by_split(Split.TEST)
        summaries = evaluate_stage(models.abnormal, bags, group_by=GroupBy.CENTER)
        centers = sorted({bag.center_id for bag in bags})
        assert list(summaries["patient"].groups) == centers


class TestAblation:
    @pytest.fixture(scope="class")
    def config(self, small_config):
        yield small_config

    def test_one_row_per_kind(self, cohort, config, tmp_path):
        kinds = [AggregatorKind.MEAN, AggregatorKind.UAAC]
        path = tmp_path / "ablation.csv"
        table = ablation_aggregators(cohort, kinds, config, output_path=path)
        assert table["kind"].tolist() == ["mean", "uaac"]
        assert list(table.columns) == ["kind", "patient_auc", "macro_f1"]
        assert pd.read_csv(path)["kind"].tolist() == ["mean", "uaac"]

    def test_is_deterministic(self, cohort, config):
        kinds = [AggregatorKind.ATTENTION]
        first = ablation_aggregators(cohort, kinds, config)
        second = ablation_aggregators(cohort, kinds, config)
        pd.testing.assert_frame_equal(first, second)

    def test_needs_an_evaluation_split(self, cohort, config):
        bags = [dataclasses.replace(bag, split=Split.TRAIN) for bag in cohort]
        train_only = dataclasses.replace(cohort, bags=tuple(bags))
        with pytest.raises(InvalidEvaluation):
            ablation_aggregators(train_only, [AggregatorKind.MEAN], config)

    def test_max_matches_attention_on_pure_bags(self, pure_cohort, pure_config):
        kinds = [AggregatorKind.MAX, AggregatorKind.ATTENTION]
        table = ablation_aggregators(pure_cohort, kinds, pure_config)
        auc = table.set_index("kind")["patient_auc"]
        assert abs(auc["max"] - auc["attention"]) <= 0.02
