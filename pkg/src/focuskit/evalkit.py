"""Metrics and the evaluation harness for stage predictions and pipeline reports."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import (
    accuracy_score,
    confusion_matrix,
    precision_recall_fscore_support,
)
from sklearn.utils import resample

from .config import EncoderConfig, RunConfig, StageConfig
from .datamodel import Cohort, VolumeBag
from .enums import (
    AggregatorKind,
    DiseaseLabel,
    GroupBy,
    PipelineStatus,
    Split,
    StageTask,
)
from .exceptions import InvalidEvaluation, UndefinedAUC, UnmatchedPatient
from .pipeline import PipelineReport
from .stage_configs import ABNORMAL, DISEASE, QUALITY
from .stages import (
    StageExample,
    StageModel,
    StagePrediction,
    stage_examples,
    train_patient_stage,
)
from .utils import derive_random_state, write_json

logger = logging.getLogger(__name__)


MIN_BOOTSTRAP_SIZE = 10


@dataclass
class ConfusionResult:
    """A confusion matrix with the per-class rates derived from it.

    Attributes:
        confusion:
            Counts of shape (K, K), rows indexed by truth and columns by prediction.
        precision:
            Per-class precision.
        recall:
            Per-class recall.
        f1:
            Per-class F1-score.
        specificity:
            Per-class specificity.
        macro_f1:
            Unweighted mean F1 over the classes present in the truth.
        accuracy:
            Fraction of correct predictions.
    """

    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    specificity: np.ndarray
    macro_f1: float
    accuracy: float


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Elementwise division with 0 / 0 defined as 0."""
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    return np.divide(
        numerator,
        denominator,
        out=np.zeros_like(numerator),
        where=denominator != 0,
    )


def _check_labels(truth: np.ndarray, pred: np.ndarray, n_classes: int) -> None:
    if len(truth) == 0:
        raise InvalidEvaluation("Cannot evaluate an empty set of predictions.")
    if len(truth) != len(pred):
        raise InvalidEvaluation(
            f"Got {len(truth)} truth labels but {len(pred)} predictions."
        )
    for name, labels in [("truth", truth), ("prediction", pred)]:
        if np.any(labels < 0) or np.any(labels >= n_classes):
            raise InvalidEvaluation(
                f"A {name} label is outside the range of {n_classes} classes."
            )


def confusion_and_f1(
    truth: np.ndarray | list[int], pred: np.ndarray | list[int], n_classes: int
) -> ConfusionResult:
    """Compute the confusion matrix and the per-class and macro F1-scores.

    Args:
        truth:
            The true class indices.
        pred:
            The predicted class indices.
        n_classes:
            The number of classes K.

    Returns:
        The confusion matrix and derived rates.

    Raises:
        InvalidEvaluation:
            If the inputs are empty, of unequal lengths or out of range.

    Examples:
        >>> result = confusion_and_f1([0, 1, 1, 0], [0, 1, 0, 0], n_classes=2)
        >>> result.confusion.tolist()
        [[2, 0], [1, 1]]
        >>> round(result.macro_f1, 4)
        0.7333
    """
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    _check_labels(truth, pred, n_classes)

    labels = list(range(n_classes))
    confusion = confusion_matrix(truth, pred, labels=labels)
    precision, recall, f1, support = precision_recall_fscore_support(
        truth, pred, labels=labels, average=None, zero_division=0
    )

    false_positives = confusion.sum(axis=0) - np.diag(confusion)
    negatives = len(truth) - support
    specificity = _safe_divide(negatives - false_positives, negatives)

    present = support > 0
    return ConfusionResult(
        confusion=confusion,
        precision=precision.astype(np.float64),
        recall=recall.astype(np.float64),
        f1=f1.astype(np.float64),
        specificity=specificity,
        macro_f1=float(np.mean(f1[present])),
        accuracy=float(accuracy_score(truth, pred)),
    )


def roc_auc(truth: np.ndarray | list[int], scores: np.ndarray | list[float]) -> float:
    """Area under the ROC curve, computed with the rank statistic.

    This equals the probability that a random positive scores higher than a random
    negative, counting ties as one half.

    Args:
        truth:
            Binary labels, 1 for positives.
        scores:
            The scores, higher meaning more positive.

    Returns:
        The AUC.

    Raises:
        UndefinedAUC:
            If only one class is present.

    Examples:
        >>> roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        0.75
    """
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_positives = int(truth.sum())
    n_negatives = len(truth) - n_positives
    if n_positives == 0 or n_negatives == 0:
        raise UndefinedAUC()
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[truth].sum() - n_positives * (n_positives + 1) / 2
    return float(u_statistic / (n_positives * n_negatives))


def roc_curve(
    truth: np.ndarray | list[int], scores: np.ndarray | list[float]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points of the ROC curve, one per distinct score.

    Args:
        truth:
            Binary labels, 1 for positives.
        scores:
            The scores, higher meaning more positive.

    Returns:
        A triple (fpr, tpr, thresholds), starting at (0, 0) with an infinite
        threshold and ending at (1, 1).

    Raises:
        UndefinedAUC:
            If only one class is present.
    """
    truth = np.asarray(truth).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    n_positives = int(truth.sum())
    n_negatives = len(truth) - n_positives
    if n_positives == 0 or n_negatives == 0:
        raise UndefinedAUC()

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    last_of_threshold = np.r_[
        np.flatnonzero(np.diff(sorted_scores)), len(sorted_scores) - 1
    ]
    true_positives = np.cumsum(truth[order])[last_of_threshold]
    false_positives = last_of_threshold + 1 - true_positives
    fpr = np.r_[0.0, false_positives / n_negatives]
    tpr = np.r_[0.0, true_positives / n_positives]
    thresholds = np.r_[np.inf, sorted_scores[last_of_threshold]]
    return fpr, tpr, thresholds


def write_roc_points(
    path: str | Path, truth: np.ndarray | list[int], scores: np.ndarray | list[float]
) -> Path:
    """Write the ROC curve points as a CSV file with columns fpr, tpr, threshold."""
    fpr, tpr, thresholds = roc_curve(truth, scores)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(dict(fpr=fpr, tpr=tpr, threshold=thresholds)).to_csv(
        path, index=False
    )
    return path


@dataclass
class ConfidenceInterval:
    """A bootstrap confidence interval.

    Attributes:
        lower:
            The lower bound.
        upper:
            The upper bound.
        point:
            The metric on the full data.
        n_skipped:
            The number of resamples on which the metric was undefined.
    """

    lower: float
    upper: float
    point: float
    n_skipped: int = 0

    def as_tuple(self) -> tuple[float, float]:
        return (self.lower, self.upper)


def bootstrap_ci(
    metric_fn: Callable[[np.ndarray, np.ndarray], float],
    truth: np.ndarray | list,
    predictions: np.ndarray | list,
    resamples: int = 1000,
    seed: int = 0,
) -> ConfidenceInterval:
    """Percentile bootstrap 95% confidence interval of a metric.

    Patients are resampled with replacement, each resample with its own seed derived
    from `seed`. Resamples on which the metric is undefined, such as an AUC on a single
    class, are skipped and counted. The bounds are the 2.5th and 97.5th percentiles of
    the valid resamples, so on skewed resample distributions the metric on the full data
    may fall outside the interval.

    Args:
        metric_fn:
            Function of (truth, predictions) returning the metric.
        truth:
            The truth, one entry per patient.
        predictions:
            The predictions or scores, one entry (or row) per patient.
        resamples:
            The number of resamples B.
        seed:
            The seed of the resampling.

    Returns:
        The confidence interval.

    Raises:
        InvalidEvaluation:
            If there are fewer than 10 patients, or the metric is undefined on every
            resample.
        UndefinedAUC:
            If the metric is undefined on the full data.
    """
    truth = np.asarray(truth)
    predictions = np.asarray(predictions)
    n = len(truth)
    if n < MIN_BOOTSTRAP_SIZE:
        raise InvalidEvaluation(
            f"The bootstrap needs at least {MIN_BOOTSTRAP_SIZE} patients, got {n}."
        )
    if resamples < 1:
        raise InvalidEvaluation("The number of resamples must be positive.")
    point = float(metric_fn(truth, predictions))

    values = list()
    n_skipped = 0
    for resample_idx in range(resamples):
        sample = resample(
            np.arange(n),
            n_samples=n,
            random_state=derive_random_state(seed, resample_idx),
        )
        try:
            values.append(float(metric_fn(truth[sample], predictions[sample])))
        except UndefinedAUC:
            n_skipped += 1
    if len(values) == 0:
        raise InvalidEvaluation("The metric is undefined on every resample.")
    if n_skipped > 0:
        logger.debug(f"Skipped {n_skipped} of {resamples} bootstrap resamples.")

    lower, upper = np.percentile(values, [2.5, 97.5])
    return ConfidenceInterval(
        lower=float(lower),
        upper=float(upper),
        point=point,
        n_skipped=n_skipped,
    )


@dataclass
class EvalSummary:
    """Classification metrics of one group of predictions.

    Attributes:
        name:
            The name of the summary, e.g. "abnormality/patient".
        class_names:
            The class names, in index order.
        n:
            The number of predictions.
        confusion:
            The confusion matrix, rows indexed by truth and columns by prediction.
        precision:
            Per-class precision.
        recall:
            Per-class recall.
        f1:
            Per-class F1-score.
        specificity:
            Per-class specificity.
        macro_f1:
            Unweighted mean F1-score over the classes present in the truth.
        accuracy:
            Fraction of correct predictions.
        auc:
            Per-class one-vs-rest AUC, None where undefined.
        macro_auc:
            Mean of the defined per-class AUCs, or None.
        macro_f1_ci:
            Bootstrap 95% confidence interval of the macro F1-score, if computed.
        groups:
            Sub-summaries per center.
    """

    name: str
    class_names: list[str]
    n: int
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    specificity: np.ndarray
    macro_f1: float
    accuracy: float
    auc: dict[str, float | None]
    macro_auc: float | None
    macro_f1_ci: ConfidenceInterval | None = None
    groups: dict[str, "EvalSummary"] = field(default_factory=dict)

    def per_class_frame(self) -> pd.DataFrame:
        """The per-class metrics as a data frame, one row per class."""
        return pd.DataFrame(
            dict(
                label=self.class_names,
                support=self.confusion.sum(axis=1),
                precision=self.precision,
                recall=self.recall,
                f1=self.f1,
                specificity=self.specificity,
                auc=[self.auc[name] for name in self.class_names],
            )
        )

    def to_dict(self) -> dict[str, Any]:
        record: dict[str, Any] = dict(
            name=self.name,
            n=self.n,
            averaging="macro",
            macro_f1=self.macro_f1,
            macro_auc=self.macro_auc,
            accuracy=self.accuracy,
            macro_f1_ci=(
                None
                if self.macro_f1_ci is None
                else dict(
                    lower=self.macro_f1_ci.lower,
                    upper=self.macro_f1_ci.upper,
                    n_skipped=self.macro_f1_ci.n_skipped,
                )
            ),
            class_names=self.class_names,
            confusion=self.confusion.tolist(),
            per_class={
                name: dict(
                    precision=float(self.precision[idx]),
                    recall=float(self.recall[idx]),
                    f1=float(self.f1[idx]),
                    specificity=float(self.specificity[idx]),
                    auc=self.auc[name],
                )
                for idx, name in enumerate(self.class_names)
            },
        )
        if self.groups:
            record["groups"] = {
                group: summary.to_dict() for group, summary in self.groups.items()
            }
        return record


def summarise(
    name: str,
    truth: np.ndarray | list[int],
    pred: np.ndarray | list[int],
    scores: np.ndarray | None,
    class_names: list[str],
    centers: list[str] | None = None,
    group_by: GroupBy = GroupBy.ALL,
    resamples: int | None = None,
    seed: int = 0,
) -> EvalSummary:
    """Build the evaluation summary of a set of predictions.

    Args:
        name:
            The name of the summary.
        truth:
            The true class indices.
        pred:
            The predicted class indices.
        scores:
            Class scores of shape (n, K) for the one-vs-rest AUCs, or None.
        class_names:
            The class names.
        centers:
            The center of every prediction, required when grouping by center.
        group_by:
            How to group the predictions.
        resamples:
            The number of bootstrap resamples of the macro-F1 interval. No interval is
            computed if None, or with fewer than 10 predictions.
        seed:
            The bootstrap seed.

    Returns:
        The summary.
    """
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    n_classes = len(class_names)
    result = confusion_and_f1(truth, pred, n_classes=n_classes)

    auc: dict[str, float | None] = dict()
    for idx, class_name in enumerate(class_names):
        auc[class_name] = None
        if scores is not None:
            try:
                auc[class_name] = roc_auc(truth == idx, np.asarray(scores)[:, idx])
            except UndefinedAUC:
                pass
    defined = [value for value in auc.values() if value is not None]

    ci = None
    if resamples is not None and len(truth) >= MIN_BOOTSTRAP_SIZE:
        ci = bootstrap_ci(
            lambda t, p: confusion_and_f1(t, p, n_classes=n_classes).macro_f1,
            truth,
            pred,
            resamples=resamples,
            seed=seed,
        )

    groups: dict[str, EvalSummary] = dict()
    if group_by == GroupBy.CENTER:
        if centers is None:
            raise InvalidEvaluation("Grouping by center requires the centers.")
        centers_arr = np.asarray(centers)
        for center in sorted(set(centers)):
            mask = centers_arr == center
            groups[center] = summarise(
                name=f"{name}/{center}",
                truth=truth[mask],
                pred=pred[mask],
                scores=None if scores is None else np.asarray(scores)[mask],
                class_names=class_names,
                resamples=resamples,
                seed=seed,
            )

    return EvalSummary(
        name=name,
        class_names=list(class_names),
        n=len(truth),
        confusion=result.confusion,
        precision=result.precision,
        recall=result.recall,
        f1=result.f1,
        specificity=result.specificity,
        macro_f1=result.macro_f1,
        accuracy=result.accuracy,
        auc=auc,
        macro_auc=float(np.mean(defined)) if defined else None,
        macro_f1_ci=ci,
        groups=groups,
    )


def evaluate_stage_predictions(
    stage: StageConfig,
    predictions: list[StagePrediction],
    examples: list[StageExample],
    centers: list[str] | None = None,
    group_by: GroupBy = GroupBy.ALL,
    resamples: int | None = None,
    seed: int = 0,
) -> dict[str, EvalSummary]:
    """Slice-level and, for patient-level stages, patient-level summaries.

    Args:
        stage:
            The stage.
        predictions:
            The stage predictions, one per example.
        examples:
            The examples holding the truth.
        centers:
            The center of every example.
        group_by:
            How to group the predictions.
        resamples:
            The number of bootstrap resamples, or None to skip the intervals.
        seed:
            The bootstrap seed.

    Returns:
        Mapping from level ("slice" or "patient") to summary.
    """
    if len(predictions) != len(examples):
        raise InvalidEvaluation(
            f"Got {len(predictions)} predictions for {len(examples)} examples."
        )
    if len(examples) == 0:
        raise InvalidEvaluation("Cannot evaluate a stage on no examples.")

    slice_scores = np.concatenate([p.slice_posteriors for p in predictions])
    slice_centers = None
    if centers is not None:
        slice_centers = [
            center
            for center, example in zip(centers, examples)
            for _ in range(len(example.slice_labels))
        ]
    summaries = dict(
        slice=summarise(
            name=f"{stage.name}/slice",
            truth=np.concatenate([example.slice_labels for example in examples]),
            pred=slice_scores.argmax(axis=1),
            scores=slice_scores,
            class_names=stage.id2label,
            centers=slice_centers,
            group_by=group_by,
            resamples=resamples,
            seed=seed,
        )
    )
    if stage.patient_level:
        patient_scores = np.stack([p.patient_posterior for p in predictions])
        summaries["patient"] = summarise(
            name=f"{stage.name}/patient",
            truth=np.array([example.patient_label for example in examples]),
            pred=patient_scores.argmax(axis=1),
            scores=patient_scores,
            class_names=stage.id2label,
            centers=centers,
            group_by=group_by,
            resamples=resamples,
            seed=seed,
        )
    return summaries


def evaluate_stage(
    model: StageModel,
    bags: list[VolumeBag],
    group_by: GroupBy = GroupBy.ALL,
    resamples: int | None = None,
    seed: int = 0,
    gradable_only: bool = True,
) -> dict[str, EvalSummary]:
    """Run a stage model on volumes and summarise its predictions.

    Args:
        model:
            The trained stage model.
        bags:
            The volumes.
        group_by:
            How to group the predictions.
        resamples:
            The number of bootstrap resamples, or None to skip the intervals.
        seed:
            The bootstrap seed.
        gradable_only:
            Whether patient-level stages only see slices labelled gradable.

    Returns:
        Mapping from level ("slice" or "patient") to summary.
    """
    examples = stage_examples(model.stage, bags, gradable_only=gradable_only)
    centers_by_patient = {bag.patient_id: bag.center_id for bag in bags}
    return evaluate_stage_predictions(
        model.stage,
        predictions=[model.predict(example.slices) for example in examples],
        examples=examples,
        centers=[centers_by_patient[example.patient_id] for example in examples],
        group_by=group_by,
        resamples=resamples,
        seed=seed,
    )


def disease_scores(report: PipelineReport) -> np.ndarray:
    """Scores over the 9 disease labels implied by a pipeline report.

    The Normal score is 1 - P(abnormal) and disease k gets P(abnormal) times the
    disease stage posterior renormalised over the 8 diseases. Reports that stopped at
    the abnormality stage spread P(abnormal) uniformly over the diseases.

    Raises:
        InvalidEvaluation:
            If the report is Ungradable.
    """
    if report.abnormal_probability is None:
        raise InvalidEvaluation(
            f"The report of {report.patient_id} has no abnormality probability."
        )
    n_diseases = len(DiseaseLabel) - 1
    if report.disease_posterior is not None:
        disease_part = np.asarray(report.disease_posterior[1:], dtype=np.float64)
        total = disease_part.sum()
        disease_part = (
            disease_part / total if total > 0 else np.full(n_diseases, 1 / n_diseases)
        )
    else:
        disease_part = np.full(n_diseases, 1 / n_diseases)
    p_abnormal = report.abnormal_probability
    return np.r_[1.0 - p_abnormal, p_abnormal * disease_part]


@dataclass
class RunEvaluation:
    """The evaluation of a batch of pipeline reports.

    Attributes:
        n_reports:
            The number of reports.
        status_counts:
            The number of reports per status.
        n_excluded:
            The number of Ungradable reports left out of the diagnosis summaries.
        summaries:
            Summaries for "gradability", "abnormality" and "disease", each
            patient-level.
        roc_points:
            The truth and scores of the binary abnormality task, for ROC curves.
    """

    n_reports: int
    status_counts: dict[str, int]
    n_excluded: int
    summaries: dict[str, EvalSummary]
    roc_points: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return dict(
            n_reports=self.n_reports,
            status_counts=self.status_counts,
            n_excluded_ungradable=self.n_excluded,
            summaries={name: s.to_dict() for name, s in self.summaries.items()},
        )

    def write(self, output_dir: str | Path) -> list[Path]:
        """Write the summary JSON plus per-class and ROC point CSV files.

        Returns:
            The written paths.
        """
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        paths = [output_dir / "eval_summary.json"]
        write_json(paths[0], self.to_dict())
        for name, summary in self.summaries.items():
            path = output_dir / f"{name}_per_class.csv"
            summary.per_class_frame().to_csv(path, index=False)
            paths.append(path)
        for name, (truth, scores) in self.roc_points.items():
            try:
                paths.append(
                    write_roc_points(output_dir / f"{name}_roc.csv", truth, scores)
                )
            except UndefinedAUC:
                logger.warning(f"No ROC curve for {name}: only one class is present.")
        return paths


def evaluate_run(
    reports: list[PipelineReport],
    truth: Cohort | list[VolumeBag],
    group_by: GroupBy = GroupBy.ALL,
    resamples: int | None = None,
    seed: int = 0,
    gradable_fraction_threshold: float = 0.5,
) -> RunEvaluation:
    """Score pipeline reports against the ground truth of a cohort.

    Ungradable reports are counted in the gradability summary and excluded from the
    abnormality and disease summaries.

    Args:
        reports:
            The pipeline reports.
        truth:
            The cohort holding the ground truth.
        group_by:
            How to group the summaries.
        resamples:
            The number of bootstrap resamples, or None to skip the intervals.
        seed:
            The bootstrap seed.
        gradable_fraction_threshold:
            The fraction of truly gradable slices that makes a volume gradable.

    Returns:
        The run evaluation.

    Raises:
        UnmatchedPatient:
            If a report has no truth record.
        InvalidEvaluation:
            If there are no reports.
    """
    if len(reports) == 0:
        raise InvalidEvaluation("There are no reports to evaluate.")
    bags = {bag.patient_id: bag for bag in truth}
    for report in reports:
        if report.patient_id not in bags:
            raise UnmatchedPatient(report.patient_id)
    reports = sorted(reports, key=lambda report: report.patient_id)

    status_counts = {
        status.value: sum(report.status == status for report in reports)
        for status in PipelineStatus
    }
    common = dict(group_by=group_by, resamples=resamples, seed=seed)

    true_ungradable = [
        int(bags[r.patient_id].gradable_mask.mean() < gradable_fraction_threshold)
        for r in reports
    ]
    summaries = dict(
        gradability=summarise(
            name="gradability",
            truth=true_ungradable,
            pred=[int(r.status == PipelineStatus.UNGRADABLE) for r in reports],
            scores=np.array(
                [[r.gradable_fraction, 1 - r.gradable_fraction] for r in reports]
            ),
            class_names=QUALITY.id2label,
            centers=[r.center_id for r in reports],
            **common,
        )
    )

    graded = [r for r in reports if r.status != PipelineStatus.UNGRADABLE]
    roc_points: dict[str, tuple[np.ndarray, np.ndarray]] = dict()
    if graded:
        centers = [r.center_id for r in graded]
        abnormal_truth = np.array(
            [int(bags[r.patient_id].is_abnormal) for r in graded]
        )
        p_abnormal = np.array([r.abnormal_probability for r in graded], dtype=float)
        summaries["abnormality"] = summarise(
            name="abnormality",
            truth=abnormal_truth,
            pred=[int(r.status == PipelineStatus.DISEASED) for r in graded],
            scores=np.c_[1 - p_abnormal, p_abnormal],
            class_names=ABNORMAL.id2label,
            centers=centers,
            **common,
        )
        roc_points["abnormality"] = (abnormal_truth, p_abnormal)
        summaries["disease"] = summarise(
            name="disease",
            truth=[bags[r.patient_id].patient_disease.index for r in graded],
            pred=[0 if r.disease is None else r.disease.index for r in graded],
            scores=np.stack([disease_scores(r) for r in graded]),
            class_names=DISEASE.id2label,
            centers=centers,
            **common,
        )
    else:
        logger.warning("Every report is Ungradable; no diagnosis metrics computed.")

    return RunEvaluation(
        n_reports=len(reports),
        status_counts=status_counts,
        n_excluded=len(reports) - len(graded),
        summaries=summaries,
        roc_points=roc_points,
    )


def ablation_aggregators(
    cohort: Cohort,
    kinds: list[AggregatorKind],
    config: RunConfig,
    task: StageTask = StageTask.ABNORMALITY,
    output_path: str | Path | None = None,
) -> pd.DataFrame:
    """Train one patient-level stage per pooling kind and compare them.

    Every kind shares the seed, and hence the encoder initialisation, of the stage.
    The models are scored on the test split, or the validation split if the test split
    is empty.

    Args:
        cohort:
            The cohort.
        kinds:
            The pooling kinds to compare.
        config:
            The run configuration, providing the training and aggregator settings.
        task:
            The patient-level task.
        output_path:
            If given, the table is also written to this CSV file.

    Returns:
        A table with columns `kind`, `patient_auc` and `macro_f1`.
    """
    stage = ABNORMAL if task == StageTask.ABNORMALITY else DISEASE
    train_config = config.train[stage.name]
    eval_bags = cohort.by_split(Split.TEST) or cohort.by_split(Split.VAL)
    if not eval_bags:
        raise InvalidEvaluation("The cohort has neither a test nor a validation split.")

    rows = list()
    for kind in kinds:
        aggregator = replace(config.aggregator, kind=AggregatorKind(kind))
        result = train_patient_stage(
            cohort,
            task=task,
            config=train_config,
            aggregator=aggregator,
            encoder_config=EncoderConfig(
                hidden_widths=config.encoder.hidden_widths,
                activation=config.encoder.activation,
            ),
        )
        patient = evaluate_stage(
            result.model, eval_bags, gradable_only=train_config.gradable_only
        )["patient"]
        if task == StageTask.ABNORMALITY:
            patient_auc = patient.auc[stage.id2label[1]]
        else:
            patient_auc = patient.macro_auc
        rows.append(
            dict(
                kind=aggregator.kind.value,
                patient_auc=patient_auc,
                macro_f1=patient.macro_f1,
            )
        )
        logger.info(
            f"Ablation {aggregator.kind.value}: patient AUC {patient_auc}, macro F1 "
            f"{patient.macro_f1:.4f}"
        )

    table = pd.DataFrame(rows, columns=["kind", "patient_auc", "macro_f1"])
    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(output_path, index=False)
    return table
