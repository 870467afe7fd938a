"""All metric configurations used in the project."""

from .config import MetricConfig


MACRO_F1 = MetricConfig(
    name="macro_f1",
    pretty_name="Macro-average F1-score",
    results_key="macro_f1",
    postprocessing_fn=lambda raw_score: f"{100 * raw_score:.2f}%",
)


MACRO_AUC = MetricConfig(
    name="macro_auc",
    pretty_name="Macro-average one-vs-rest AUC",
    results_key="macro_auc",
    postprocessing_fn=lambda raw_score: f"{raw_score:.4f}",
)


ACCURACY = MetricConfig(
    name="accuracy",
    pretty_name="Accuracy",
    results_key="accuracy",
    postprocessing_fn=lambda raw_score: f"{100 * raw_score:.2f}%",
)


SUMMARY_METRICS = [MACRO_F1, MACRO_AUC, ACCURACY]
