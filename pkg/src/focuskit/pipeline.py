"""The end-to-end diagnostic pipeline: quality gate, abnormality triage, diagnosis."""

import copy
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import PipelineConfig
from .datamodel import CohortManifest, ManifestEntry, load_volume, read_manifest
from .enums import DiseaseLabel, PipelineStatus, Split
from .exceptions import CheckpointMismatch, InvalidEvaluation
from .stage_configs import ABNORMAL, DISEASE, QUALITY
from .stages import StageModel, load_stage_model
from .utils import write_json

logger = logging.getLogger(__name__)


REPORT_SCHEMA_VERSION = 1

REPORT_DIR = "reports"

SUMMARY_NAME = "batch_summary.json"

# A slice is gradable when its gradable posterior reaches this value
SLICE_GRADABLE_THRESHOLD = 0.5

NO_GRADABLE_SLICES = "no gradable slices"


@dataclass
class EvidenceSlice:
    """A slice supporting a diagnosis.

    Attributes:
        slice_index:
            The index of the slice in the original volume.
        weight:
            The pooling weight of the slice in the disease stage.
        certainty:
            The certainty of the slice posterior.
    """

    slice_index: int
    weight: float
    certainty: float


@dataclass
class PipelineReport:
    """The structured result of running the pipeline on one volume.

    Attributes:
        patient_id:
            The patient identifier.
        center_id:
            The imaging center of the volume.
        status:
            The final status.
        reason:
            Why the pipeline stopped early, or None if it reached a diagnosis.
        n_slices:
            The number of slices in the volume.
        n_gradable:
            The number of slices judged gradable.
        gradable_fraction:
            The fraction of gradable slices.
        abnormal_probability:
            The abnormality probability. None for Ungradable volumes.
        disease:
            The diagnosed disease. Only set for Diseased volumes.
        disease_posterior:
            The disease stage posterior over all 9 classes. Only set for Diseased
            volumes.
        evidence:
            The highest-weighted disease stage slices, by decreasing weight. Only
            non-empty for Diseased volumes.
        model_versions:
            The checksum of every stage checkpoint.
        timings:
            Milliseconds spent in every stage that ran.
        schema_version:
            The version of the report format.
    """

    patient_id: str
    center_id: str
    status: PipelineStatus
    reason: str | None
    n_slices: int
    n_gradable: int
    gradable_fraction: float
    abnormal_probability: float | None = None
    disease: DiseaseLabel | None = None
    disease_posterior: list[float] | None = None
    evidence: list[EvidenceSlice] = field(default_factory=list)
    model_versions: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        """The report as JSON types, leaving out the fields that do not apply."""
        record: dict[str, Any] = dict(
            schema_version=self.schema_version,
            patient_id=self.patient_id,
            center_id=self.center_id,
            status=self.status.value,
            n_slices=self.n_slices,
            n_gradable=self.n_gradable,
            gradable_fraction=self.gradable_fraction,
        )
        if self.reason is not None:
            record["reason"] = self.reason
        if self.abnormal_probability is not None:
            record["abnormal_probability"] = self.abnormal_probability
        if self.status == PipelineStatus.DISEASED:
            assert self.disease is not None
            record["disease"] = self.disease.value
            record["disease_posterior"] = self.disease_posterior
            record["evidence"] = [
                dict(
                    slice_index=evidence.slice_index,
                    weight=evidence.weight,
                    certainty=evidence.certainty,
                )
                for evidence in self.evidence
            ]
        record["model_versions"] = dict(self.model_versions)
        record["timings"] = dict(self.timings)
        return record

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "PipelineReport":
        """Parse a report written by `to_dict`.

        Raises:
            InvalidEvaluation:
                If the record is not a valid report.
        """
        try:
            return cls(
                patient_id=record["patient_id"],
                center_id=record["center_id"],
                status=PipelineStatus(record["status"]),
                reason=record.get("reason"),
                n_slices=int(record["n_slices"]),
                n_gradable=int(record["n_gradable"]),
                gradable_fraction=float(record["gradable_fraction"]),
                abnormal_probability=record.get("abnormal_probability"),
                disease=(
                    DiseaseLabel(record["disease"]) if "disease" in record else None
                ),
                disease_posterior=record.get("disease_posterior"),
                evidence=[EvidenceSlice(**item) for item in record.get("evidence", [])],
                model_versions=record.get("model_versions", dict()),
                timings=record.get("timings", dict()),
                schema_version=int(record.get("schema_version", REPORT_SCHEMA_VERSION)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidEvaluation(f"Invalid pipeline report: {e!r}")


@dataclass
class FocusModels:
    """The three trained stage models of the pipeline.

    Attributes:
        quality:
            The slice-level quality gate.
        abnormal:
            The abnormality stage.
        disease:
            The disease stage.
    """

    quality: StageModel
    abnormal: StageModel
    disease: StageModel

    def __post_init__(self):
        dims = {
            model.stage.name: model.feature_dim
            for model in [self.quality, self.abnormal, self.disease]
        }
        if len(set(dims.values())) != 1:
            raise CheckpointMismatch(
                path=self.disease.stage.checkpoint_name,
                reason=f"the stages disagree on the feature dimension: {dims}",
            )

    @property
    def feature_dim(self) -> int:
        return self.quality.feature_dim

    @property
    def versions(self) -> dict[str, str]:
        return {
            model.stage.name: model.checksum or ""
            for model in [self.quality, self.abnormal, self.disease]
        }


def load_models(directory: str | Path) -> FocusModels:
    """Load the three stage checkpoints from a directory.

    Raises:
        CheckpointMismatch:
            If a checkpoint is missing, naming the file, or the stages do not fit
            together.
    """
    directory = Path(directory)
    return FocusModels(
        quality=load_stage_model(directory, QUALITY),
        abnormal=load_stage_model(directory, ABNORMAL),
        disease=load_stage_model(directory, DISEASE),
    )


def _milliseconds(start: float) -> float:
    return round(1000 * (time.perf_counter() - start), 3)


def run(
    volume: Any, models: FocusModels, config: PipelineConfig | None = None
) -> PipelineReport:
    """Run the pipeline on one volume.

    Args:
        volume:
            The volume, a `VolumeBag` (or any object with `patient_id`, `center_id`
            and `slices`).
        models:
            The trained stage models.
        config:
            The pipeline configuration. Defaults to `PipelineConfig()`.

    Returns:
        The report.

    Raises:
        DimensionMismatch:
            If the feature dimension of the volume does not match the models.
    """
    config = config or PipelineConfig()
    slices = np.asarray(volume.slices, dtype=np.float64)
    n_slices = slices.shape[0]
    timings: dict[str, float] = dict()

    def report(status: PipelineStatus, reason: str | None, **kwargs) -> PipelineReport:
        return PipelineReport(
            patient_id=volume.patient_id,
            center_id=volume.center_id,
            status=status,
            reason=reason,
            n_slices=n_slices,
            n_gradable=n_gradable,
            gradable_fraction=gradable_fraction,
            model_versions=models.versions,
            timings=timings,
            **kwargs,
        )

    start = time.perf_counter()
    quality = models.quality.predict(slices)
    gradable = quality.slice_posteriors[:, 0] >= SLICE_GRADABLE_THRESHOLD
    n_gradable = int(gradable.sum())
    gradable_fraction = n_gradable / n_slices
    timings[QUALITY.name] = _milliseconds(start)

    if config.drop_ungradable_slices and n_gradable == 0:
        return report(PipelineStatus.UNGRADABLE, NO_GRADABLE_SLICES)
    if gradable_fraction < config.gradable_fraction_threshold:
        return report(
            PipelineStatus.UNGRADABLE,
            f"gradable fraction {gradable_fraction:.3f} is below "
            f"{config.gradable_fraction_threshold}",
        )

    kept = (
        np.flatnonzero(gradable)
        if config.drop_ungradable_slices
        else np.arange(n_slices)
    )
    kept_slices = slices[kept]

    start = time.perf_counter()
    abnormal = models.abnormal.predict(kept_slices)
    assert abnormal.patient_posterior is not None
    abnormal_probability = float(abnormal.patient_posterior[1])
    timings[ABNORMAL.name] = _milliseconds(start)

    if abnormal_probability < config.abnormal_threshold:
        return report(
            PipelineStatus.NORMAL,
            f"abnormal probability {abnormal_probability:.3f} is below "
            f"{config.abnormal_threshold}",
            abnormal_probability=abnormal_probability,
        )

    start = time.perf_counter()
    disease = models.disease.predict(kept_slices)
    assert disease.patient_posterior is not None and disease.aggregation is not None
    # Normal is decided by the abnormality stage; np.argmax breaks ties by index
    disease_idx = 1 + int(np.argmax(disease.patient_posterior[1:]))

    weights = disease.aggregation.weights
    certainties = disease.aggregation.certainties
    order = np.lexsort((np.arange(len(weights)), -weights))[: config.evidence_top_k]
    evidence = [
        EvidenceSlice(
            slice_index=int(kept[idx]),
            weight=float(weights[idx]),
            certainty=float(certainties[idx]),
        )
        for idx in order
    ]
    timings[DISEASE.name] = _milliseconds(start)

    return report(
        PipelineStatus.DISEASED,
        None,
        abnormal_probability=abnormal_probability,
        disease=DiseaseLabel.from_index(disease_idx),
        disease_posterior=[float(p) for p in disease.patient_posterior],
        evidence=evidence,
    )


@dataclass
class BatchSummary:
    """Summary of a batch run.

    Attributes:
        n_patients:
            The number of volumes submitted.
        status_counts:
            The number of reports per status.
        failures:
            The patients whose run failed, with the error message.
        mean_latency_ms:
            Mean milliseconds per stage, over the reports where the stage ran.
        model_versions:
            The checksum of every stage checkpoint.
        reports:
            The reports, ordered by patient ID.
    """

    n_patients: int
    status_counts: dict[str, int]
    failures: list[dict[str, str]]
    mean_latency_ms: dict[str, float]
    model_versions: dict[str, str]
    reports: list[PipelineReport] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dict(
            schema_version=REPORT_SCHEMA_VERSION,
            n_patients=self.n_patients,
            n_reports=len(self.reports),
            n_failures=len(self.failures),
            status_counts=self.status_counts,
            failures=self.failures,
            mean_latency_ms=self.mean_latency_ms,
            model_versions=self.model_versions,
        )


def run_batch(
    manifest: str | Path | CohortManifest,
    models: FocusModels,
    config: PipelineConfig | None = None,
    output_dir: str | Path | None = None,
    threads: int = 1,
    split: Split | None = None,
) -> BatchSummary:
    """Run the pipeline on every volume of a manifest.

    Failures of single volumes, such as corrupt tensor files, are recorded in the
    summary and do not stop the batch.

    Args:
        manifest:
            The manifest, or the path of the manifest or its directory.
        models:
            The trained stage models.
        config:
            The pipeline configuration. Defaults to `PipelineConfig()`.
        output_dir:
            If given, the reports are written to `<output_dir>/reports/<id>.json` and
            the summary to `<output_dir>/batch_summary.json`.
        threads:
            Number of worker threads. Every worker uses its own copy of the models;
            the output does not depend on this number.
        split:
            If given, only the volumes of this split are run.

    Returns:
        The batch summary.

    Raises:
        CheckpointMismatch:
            If the models do not match the feature dimension of the manifest.
    """
    config = config or PipelineConfig()
    if not isinstance(manifest, CohortManifest):
        manifest = read_manifest(manifest)
    if manifest.feature_dim != models.feature_dim:
        raise CheckpointMismatch(
            path=models.quality.stage.checkpoint_name,
            reason=(
                f"the models expect {models.feature_dim} features but the cohort has "
                f"{manifest.feature_dim}"
            ),
        )

    entries = sorted(
        (e for e in manifest.entries if split is None or e.split == split),
        key=lambda e: e.patient_id,
    )
    local = threading.local()

    def process(entry: ManifestEntry) -> PipelineReport | dict[str, str]:
        worker_models = models
        if threads > 1:
            if not hasattr(local, "models"):
                local.models = copy.deepcopy(models)
            worker_models = local.models
        try:
            volume = load_volume(manifest, entry)
            return run(volume, worker_models, config)
        except Exception as e:
            logger.warning(
                f"The pipeline failed for patient {entry.patient_id}: "
                f"{type(e).__name__}: {e}"
            )
            return dict(patient_id=entry.patient_id, error=f"{type(e).__name__}: {e}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(process, entries))
    else:
        outcomes = [process(entry) for entry in entries]

    reports = [o for o in outcomes if isinstance(o, PipelineReport)]
    failures = [o for o in outcomes if isinstance(o, dict)]

    latencies: dict[str, list[float]] = dict()
    for report in reports:
        for stage_name, ms in report.timings.items():
            latencies.setdefault(stage_name, list()).append(ms)

    summary = BatchSummary(
        n_patients=len(entries),
        status_counts={
            status.value: sum(r.status == status for r in reports)
            for status in PipelineStatus
        },
        failures=failures,
        mean_latency_ms={
            name: float(np.mean(values)) for name, values in latencies.items()
        },
        model_versions=models.versions,
        reports=reports,
    )
    logger.info(
        f"Ran the pipeline on {len(entries)} volumes: "
        + ", ".join(f"{count} {name}" for name, count in summary.status_counts.items())
        + f", {len(failures)} failed."
    )

    if output_dir is not None:
        output_dir = Path(output_dir)
        for report in reports:
            write_json(
                output_dir / REPORT_DIR / f"{report.patient_id}.json", report.to_dict()
            )
        write_json(output_dir / SUMMARY_NAME, summary.to_dict())
    return summary


def read_reports(directory: str | Path) -> list[PipelineReport]:
    """Read the reports of a batch run, ordered by patient ID.

    Args:
        directory:
            The output directory of `run_batch`, or its `reports` subdirectory.

    Returns:
        The reports.
    """
    directory = Path(directory)
    if (directory / REPORT_DIR).is_dir():
        directory = directory / REPORT_DIR
    reports = list()
    for path in sorted(directory.glob("*.json")):
        with path.open(encoding="utf-8") as f:
            reports.append(PipelineReport.from_dict(json.load(f)))
    return sorted(reports, key=lambda report: report.patient_id)
