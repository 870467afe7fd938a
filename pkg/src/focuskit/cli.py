"""Command-line interface for generating cohorts, training and running the pipeline."""

import functools
import logging
import sys
from pathlib import Path
from typing import Callable

import click

from .config import STAGE_NAMES, RunConfig, load_run_config
from .enums import AggregatorKind, GroupBy, Split, StageTask
from .exceptions import (
    CheckpointMismatch,
    CohortValidationError,
    DegenerateData,
    InvalidCohortSpec,
    InvalidConfig,
    InvalidEvaluation,
    NonFiniteTensor,
    TensorFormatError,
    TrainingDiverged,
    TruncatedTensor,
    UnmatchedPatient,
)
from .workflow import Workflow

logger = logging.getLogger(__name__)


# First match wins
EXIT_CODES: list[tuple[tuple[type[BaseException], ...], int]] = [
    ((InvalidConfig, InvalidCohortSpec), 2),
    (
        (
            OSError,
            TensorFormatError,
            TruncatedTensor,
            NonFiniteTensor,
            CohortValidationError,
        ),
        3,
    ),
    ((TrainingDiverged,), 4),
    ((CheckpointMismatch,), 5),
    ((UnmatchedPatient,), 6),
    ((DegenerateData, InvalidEvaluation), 7),
]


def exit_code_for(error: BaseException) -> int | None:
    """The exit code of an error, or None if the error is unexpected.

    Args:
        error:
            The raised error.

    Returns:
        The exit code.

    Examples:
        >>> exit_code_for(InvalidConfig("train", "epochs must be at least 1"))
        2
        >>> exit_code_for(CheckpointMismatch("disease.ckpt", "file not found"))
        5
        >>> exit_code_for(KeyError("x")) is None
        True
    """
    for error_types, code in EXIT_CODES:
        if isinstance(error, error_types):
            return code
    return None


def handle_errors(fn: Callable) -> Callable:
    """Decorator turning the known errors of a command into stable exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:
            code = exit_code_for(e)
            if code is None:
                raise
            message = getattr(e, "message", str(e))
            logger.error(f"{type(e).__name__}: {message}")
            sys.exit(code)

    return wrapper


def _load_config(config: str | None) -> RunConfig:
    return load_run_config(Path(config) if config is not None else None)


@click.group()
@click.option(
    "--verbose",
    "-v",
    is_flag=True,
    show_default=True,
    help="Whether extra output should be shown, such as the loss of every epoch.",
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="The number of threads for reading cohorts and running the pipeline. The "
    "outputs do not depend on it.",
)
@click.pass_context
def focuskit(ctx: click.Context, verbose: bool, threads: int):
    """Synthetic OCT cohorts, staged training and the diagnostic pipeline."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    ctx.obj["threads"] = threads


@focuskit.command()
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False),
    default=None,
    help="The JSON run configuration. Defaults to the default configuration.",
)
@click.option("--out", "-o", required=True, help="The output directory of the cohort.")
@click.pass_context
@handle_errors
def generate(ctx: click.Context, config: str | None, out: str):
    """Generate a synthetic cohort with its manifest and provenance."""
    workflow = Workflow(
        config=_load_config(config),
        threads=ctx.obj["threads"],
        verbose=ctx.obj["verbose"],
    )
    cohort = workflow.generate(out)
    click.echo(f"Wrote {len(cohort)} volumes to {out}.")


@focuskit.command()
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False),
    default=None,
    help="The JSON run configuration. Defaults to the default configuration.",
)
@click.option("--data", "-d", required=True, help="The cohort directory.")
@click.option(
    "--stage",
    "-s",
    type=click.Choice(STAGE_NAMES + ["all"]),
    default="all",
    show_default=True,
    help="The stage to train.",
)
@click.option("--out", "-o", required=True, help="The output directory of the models.")
@click.option(
    "--no-progress-bar",
    "-np",
    is_flag=True,
    show_default=True,
    help="Whether progress bars should be hidden.",
)
@click.pass_context
@handle_errors
def train(
    ctx: click.Context,
    config: str | None,
    data: str,
    stage: str,
    out: str,
    no_progress_bar: bool,
):
    """Train one or all stages and save their checkpoints."""
    workflow = Workflow(
        config=_load_config(config),
        progress_bar=not no_progress_bar,
        threads=ctx.obj["threads"],
        verbose=ctx.obj["verbose"],
    )
    outcomes = workflow.train(data, output_dir=out, stage=stage)
    for name, outcome in outcomes.items():
        click.echo(f"{name}: {outcome.headline}")


@focuskit.command()
@click.option("--models", "-m", required=True, help="The directory of the models.")
@click.option("--data", "-d", required=True, help="The cohort directory.")
@click.option("--out", "-o", required=True, help="The output directory of the reports.")
@click.option(
    "--split",
    type=click.Choice([split.value for split in Split] + ["all"]),
    default=Split.TEST.value,
    show_default=True,
    help="The split to run the pipeline on.",
)
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False),
    default=None,
    help="The JSON run configuration, providing the pipeline thresholds.",
)
@click.pass_context
@handle_errors
def infer(
    ctx: click.Context,
    models: str,
    data: str,
    out: str,
    split: str,
    config: str | None,
):
    """Run the diagnostic pipeline on the volumes of a cohort."""
    workflow = Workflow(
        config=_load_config(config),
        threads=ctx.obj["threads"],
        verbose=ctx.obj["verbose"],
    )
    summary = workflow.infer(
        models,
        data_dir=data,
        output_dir=out,
        split=None if split == "all" else Split(split),
    )
    counts = ", ".join(
        f"{status}: {count}" for status, count in summary.status_counts.items()
    )
    click.echo(f"Processed {summary.n_patients} volumes ({counts}).")
    if summary.failures:
        click.echo(f"{len(summary.failures)} volumes failed, see the batch summary.")


@focuskit.command(name="eval")
@click.option(
    "--reports", "-r", required=True, help="The output directory of the inference."
)
@click.option(
    "--truth", "-t", required=True, help="The cohort manifest or its directory."
)
@click.option(
    "--group-by",
    type=click.Choice([group.value for group in GroupBy]),
    default=None,
    help="How to group the summaries. Defaults to the configured grouping.",
)
@click.option(
    "--out", "-o", required=True, help="The output directory of the summaries."
)
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False),
    default=None,
    help="The JSON run configuration, providing the evaluation settings.",
)
@click.pass_context
@handle_errors
def evaluate(
    ctx: click.Context,
    reports: str,
    truth: str,
    group_by: str | None,
    out: str,
    config: str | None,
):
    """Score pipeline reports against the truth of a cohort."""
    workflow = Workflow(
        config=_load_config(config),
        threads=ctx.obj["threads"],
        verbose=ctx.obj["verbose"],
    )
    evaluation = workflow.evaluate(
        reports,
        truth_path=truth,
        output_dir=out,
        group_by=None if group_by is None else GroupBy(group_by),
    )
    for task_name, summary in evaluation.summaries.items():
        groups = {"all": summary} | summary.groups
        for group_name, group in groups.items():
            auc = "n/a" if group.macro_auc is None else f"{group.macro_auc:.4f}"
            click.echo(
                f"{task_name} [{group_name}]: macro-F1 {group.macro_f1:.4f}, "
                f"macro-AUC {auc}"
            )


@focuskit.command()
@click.option(
    "--config",
    "-c",
    type=click.Path(dir_okay=False),
    default=None,
    help="The JSON run configuration. Defaults to the default configuration.",
)
@click.option("--data", "-d", required=True, help="The cohort directory.")
@click.option(
    "--kinds",
    "-k",
    multiple=True,
    type=click.Choice([kind.value for kind in AggregatorKind]),
    help="The pooling kinds to compare. Defaults to every kind.",
)
@click.option(
    "--task",
    type=click.Choice([StageTask.ABNORMALITY.value, StageTask.DISEASE.value]),
    default=StageTask.ABNORMALITY.value,
    show_default=True,
    help="The patient-level task.",
)
@click.option(
    "--seed",
    multiple=True,
    type=int,
    help="Training seeds to repeat the comparison with.",
)
@click.option("--out", "-o", required=True, help="The output directory of the table.")
@click.pass_context
@handle_errors
def ablate(
    ctx: click.Context,
    config: str | None,
    data: str,
    kinds: tuple[str],
    task: str,
    seed: tuple[int],
    out: str,
):
    """Compare the pooling kinds on a patient-level stage."""
    workflow = Workflow(
        config=_load_config(config),
        threads=ctx.obj["threads"],
        verbose=ctx.obj["verbose"],
    )
    table = workflow.ablate(
        data,
        kinds=[AggregatorKind(kind) for kind in kinds] or None,
        task=StageTask(task),
        output_dir=out,
        seeds=list(seed) or None,
    )
    click.echo(table.to_string(index=False))


def main():
    focuskit(obj=dict())
