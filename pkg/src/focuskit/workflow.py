"""Main Workflow class, running the generate, train, infer and evaluate steps."""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from .config import RunConfig
from .datamodel import Cohort, load_cohort
from .enums import AggregatorKind, GroupBy, Split, StageTask
from .evalkit import (
    EvalSummary,
    RunEvaluation,
    ablation_aggregators,
    evaluate_run,
    evaluate_stage,
)
from .pipeline import BatchSummary, load_models, read_reports, run_batch
from .scoring import aggregate_scores, log_scores
from .stage_configs import ABNORMAL, DISEASE, QUALITY, get_all_stage_configs
from .stages import TrainResult, load_stage_model, train_patient_stage, train_quality
from .synthgen import gen_cohort
from .utils import canonical_json, get_package_version, sha256_bytes, write_json

logger = logging.getLogger(__name__)


PROVENANCE_NAME = "provenance.json"


@dataclass
class TrainOutcome:
    """The result of training one stage through the workflow.

    Attributes:
        result:
            The trained model and its loss history.
        checkpoint:
            The path of the saved checkpoint.
        history_path:
            The path of the loss history CSV file.
        val_summaries:
            Validation summaries per level, empty without a validation split.
    """

    result: TrainResult
    checkpoint: Path
    history_path: Path
    val_summaries: dict[str, EvalSummary]

    @property
    def headline(self) -> str:
        """A one-line description of the validation metrics."""
        if not self.val_summaries:
            return "no validation split"
        parts = list()
        for level, summary in self.val_summaries.items():
            auc = "n/a" if summary.macro_auc is None else f"{summary.macro_auc:.4f}"
            parts.append(f"{level} AUC {auc}, {level} macro-F1 {summary.macro_f1:.4f}")
        return "; ".join(parts)


class Workflow:
    """Running the full generate, train, infer, evaluate and ablate workflow.

    Args:
        config:
            The run configuration. Defaults to the default configuration.
        progress_bar:
            Whether progress bars should be shown during training. Defaults to False.
        threads:
            The number of threads used for reading cohorts and running the pipeline.
            Outputs do not depend on it. Defaults to 1.
        verbose:
            Whether to output additional output. Defaults to False.

    Attributes:
        config:
            The run configuration.
        threads:
            The number of threads.
    """

    def __init__(
        self,
        config: RunConfig | None = None,
        progress_bar: bool = False,
        threads: int = 1,
        verbose: bool = False,
    ):
        self.config = config or RunConfig.from_dict(dict())
        self.threads = threads
        for train_config in self.config.train.values():
            train_config.progress_bar = progress_bar

        logging_level = logging.DEBUG if verbose else logging.INFO
        logging.getLogger("focuskit").setLevel(logging_level)

    @property
    def config_hash(self) -> str:
        """The SHA-256 hash of the canonical effective configuration."""
        return sha256_bytes(canonical_json(self.config.to_dict()).encode("utf-8"))

    def generate(self, output_dir: str | Path) -> Cohort:
        """Generate the synthetic cohort and write it with its provenance.

        Args:
            output_dir:
                The output directory.

        Returns:
            The cohort.
        """
        output_dir = Path(output_dir)
        cohort = gen_cohort(self.config.synth, output_dir=output_dir)
        write_json(
            output_dir / PROVENANCE_NAME,
            dict(
                tool="focuskit",
                version=get_package_version(),
                seed=self.config.seed,
                config_hash=self.config_hash,
                config=self.config.to_dict(),
            ),
        )
        logger.info(f"Wrote {len(cohort)} volumes to {output_dir}.")
        return cohort

    def train(
        self, data_dir: str | Path, output_dir: str | Path, stage: str = "all"
    ) -> dict[str, TrainOutcome]:
        """Train one or all stages and save their checkpoints.

        Args:
            data_dir:
                The cohort directory.
            output_dir:
                The directory of the checkpoints and loss histories.
            stage:
                The stage name, or "all".

        Returns:
            The outcome of every trained stage.

        Raises:
            CheckpointMismatch:
                If the disease stage shares the abnormality encoder and the
                abnormality checkpoint is neither trained now nor present.
            DegenerateData:
                If a stage has a single training class.
            TrainingDiverged:
                If the training loss becomes non-finite.
        """
        stage_configs = get_all_stage_configs()
        if stage == "all":
            names = list(stage_configs)
        elif stage in stage_configs:
            names = [stage]
        else:
            raise ValueError(f"Unknown stage {stage!r}.")

        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        cohort = load_cohort(data_dir, threads=self.threads)
        val_bags = cohort.by_split(Split.VAL)

        outcomes: dict[str, TrainOutcome] = dict()
        for name in names:
            train_config = self.config.train[name]
            if name == QUALITY.name:
                result = train_quality(
                    cohort, train_config, encoder_config=self.config.encoder
                )
            else:
                shared_encoder = None
                if name == DISEASE.name and self.config.encoder.share_encoder:
                    if ABNORMAL.name in outcomes:
                        abnormal_model = outcomes[ABNORMAL.name].result.model
                    else:
                        abnormal_model = load_stage_model(output_dir, ABNORMAL)
                    shared_encoder = abnormal_model.encoder
                result = train_patient_stage(
                    cohort,
                    task=stage_configs[name].task,
                    config=train_config,
                    aggregator=self.config.aggregator,
                    encoder_config=self.config.encoder,
                    shared_encoder=shared_encoder,
                )

            result.model.save(output_dir)
            history_path = output_dir / f"{name}_history.csv"
            result.history.to_csv(history_path, index=False)

            val_summaries: dict[str, EvalSummary] = dict()
            if val_bags:
                val_summaries = evaluate_stage(
                    result.model, val_bags, gradable_only=train_config.gradable_only
                )
            outcome = TrainOutcome(
                result=result,
                checkpoint=output_dir / result.model.stage.checkpoint_name,
                history_path=history_path,
                val_summaries=val_summaries,
            )
            outcomes[name] = outcome
            logger.info(f"Validation scores of the {name} stage: {outcome.headline}")
        return outcomes

    def infer(
        self,
        models_dir: str | Path,
        data_dir: str | Path,
        output_dir: str | Path,
        split: Split | None = Split.TEST,
    ) -> BatchSummary:
        """Run the pipeline on the volumes of a cohort.

        Args:
            models_dir:
                The directory of the checkpoints.
            data_dir:
                The cohort directory.
            output_dir:
                The directory of the reports and the batch summary.
            split:
                The split to run on, or None for every volume.

        Returns:
            The batch summary.

        Raises:
            CheckpointMismatch:
                If a checkpoint is missing or the models do not fit the cohort.
        """
        models = load_models(models_dir)
        return run_batch(
            data_dir,
            models=models,
            config=self.config.pipeline,
            output_dir=output_dir,
            threads=self.threads,
            split=split,
        )

    def evaluate(
        self,
        reports_dir: str | Path,
        truth_path: str | Path,
        output_dir: str | Path | None = None,
        group_by: GroupBy | None = None,
    ) -> RunEvaluation:
        """Score pipeline reports against the truth of a cohort.

        Args:
            reports_dir:
                The output directory of the inference step, or its reports.
            truth_path:
                The manifest of the cohort, or its directory.
            output_dir:
                If given, where the summary JSON and CSV files are written.
            group_by:
                How to group the summaries. Defaults to the configured grouping.

        Returns:
            The run evaluation.

        Raises:
            UnmatchedPatient:
                If a report has no truth record.
        """
        reports = read_reports(reports_dir)
        cohort = load_cohort(truth_path, threads=self.threads)
        evaluation = evaluate_run(
            reports,
            truth=cohort,
            group_by=group_by or self.config.eval.group_by,
            resamples=self.config.eval.bootstrap_resamples,
            seed=self.config.eval.seed or 0,
            gradable_fraction_threshold=(
                self.config.pipeline.gradable_fraction_threshold
            ),
        )
        log_scores(evaluation.summaries)
        if output_dir is not None:
            evaluation.write(output_dir)
        return evaluation

    def ablate(
        self,
        data_dir: str | Path,
        kinds: list[AggregatorKind] | None = None,
        task: StageTask = StageTask.ABNORMALITY,
        output_dir: str | Path | None = None,
        seeds: list[int] | None = None,
    ) -> pd.DataFrame:
        """Compare pooling kinds on one patient-level stage.

        Args:
            data_dir:
                The cohort directory.
            kinds:
                The pooling kinds. Defaults to every kind.
            task:
                The patient-level task.
            output_dir:
                If given, the table is written to `<output_dir>/ablation.csv`.
            seeds:
                Training seeds to repeat the comparison with. Defaults to the
                configured seed of the stage.

        Returns:
            The table with columns `seed`, `kind`, `patient_auc` and `macro_f1`.
        """
        kinds = kinds or list(AggregatorKind)
        cohort = load_cohort(data_dir, threads=self.threads)
        stage_name = ABNORMAL.name if task == StageTask.ABNORMALITY else DISEASE.name
        seeds = seeds or [self.config.train[stage_name].seed or 0]

        tables = list()
        for seed in seeds:
            config = copy.deepcopy(self.config)
            config.train[stage_name].seed = seed
            table = ablation_aggregators(cohort, kinds=kinds, config=config, task=task)
            table.insert(0, "seed", seed)
            tables.append(table)
        table = pd.concat(tables, ignore_index=True)

        if len(seeds) > 1:
            for kind, group in table.groupby("kind", sort=False):
                auc, auc_se = aggregate_scores(
                    group.to_dict("records"), metric_name="patient_auc"
                )
                logger.info(f"{kind}: patient AUC {auc:.4f} ± {auc_se:.4f}")

        if output_dir is not None:
            output_dir = Path(output_dir)
            output_dir.mkdir(parents=True, exist_ok=True)
            table.to_csv(output_dir / "ablation.csv", index=False)
        return table
