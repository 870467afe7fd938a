"""Functions related to scoring."""

import logging
import warnings

import numpy as np
from tabulate import tabulate

from .config import MetricConfig
from .evalkit import EvalSummary
from .metric_configs import SUMMARY_METRICS

logger = logging.getLogger(__name__)


def _metric_value(summary: EvalSummary, metric_config: MetricConfig) -> float | None:
    return getattr(summary, metric_config.results_key)


def log_scores(
    summaries: dict[str, EvalSummary],
    metric_configs: list[MetricConfig] = SUMMARY_METRICS,
    only_return_log: bool = False,
) -> dict | str:
    """Log the scores of a set of evaluation summaries.

    Args:
        summaries:
            The summaries, keyed by task name.
        metric_configs:
            The metrics to log. Defaults to macro-F1, macro-AUC and accuracy.
        only_return_log:
            If only the logging string should be returned. Defaults to False.

    Returns:
        If `only_return_log` is set then a string is returned containing the logged
        table. Otherwise, a nested dictionary with the task names as keys and, for
        each, a mapping from group ("all" or a center) to metric values.
    """
    headers = ["Task", "Group", "n"] + [cfg.pretty_name for cfg in metric_configs]
    rows = list()
    total_dict: dict[str, dict[str, dict[str, float | None]]] = dict()
    for task_name, summary in summaries.items():
        total_dict[task_name] = dict()
        groups = {"all": summary} | summary.groups
        for group_name, group in groups.items():
            scores = {
                cfg.name: _metric_value(group, cfg) for cfg in metric_configs
            }
            total_dict[task_name][group_name] = scores
            row = [task_name, group_name, group.n]
            for cfg in metric_configs:
                value = scores[cfg.name]
                row.append("n/a" if value is None else cfg.postprocessing_fn(value))
            rows.append(row)

        if summary.macro_f1_ci is not None:
            logger.info(
                f"{task_name} macro-F1 95% CI: "
                f"[{summary.macro_f1_ci.lower:.4f}, {summary.macro_f1_ci.upper:.4f}]"
            )

    table = tabulate(rows, headers=headers, tablefmt="github")
    logger.info(f"Evaluation scores:\n{table}")

    if only_return_log:
        return table
    else:
        return total_dict


def aggregate_scores(
    scores: list[dict[str, float]], metric_name: str
) -> tuple[float, float]:
    """Helper function to compute the mean with confidence intervals.

    Args:
        scores:
            list of dictionaries with the names of the metrics as keys, such as
            "patient_auc", and values the metric values, e.g. one per seed.
        metric_name:
            The metric to collect from `scores`.

    Returns:
        A pair (score, se) of the mean and 1.96 times the standard error of the
        scores.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        values = [dct[metric_name] for dct in scores]
        mean_score = np.mean(values)
        if len(values) > 1:
            sample_std = np.std(values, ddof=1)
            se = sample_std / np.sqrt(len(values))
        else:
            se = np.nan
        return (float(mean_score), float(1.96 * se))
