"""All stage configurations used in the project."""

from .config import LabelConfig, StageConfig
from .enums import DiseaseLabel, StageTask


def get_all_stage_configs() -> dict[str, StageConfig]:
    """Get all the pipeline stages, in pipeline order.

    Returns:
        A mapping between names of stages and their configurations.
    """
    return {cfg.name: cfg for cfg in globals().values() if isinstance(cfg, StageConfig)}


QUALITY = StageConfig(
    name="quality",
    task=StageTask.QUALITY,
    labels=[
        LabelConfig(name="Gradable", synonyms=["gradable", "GOOD"]),
        LabelConfig(name="Ungradable", synonyms=["ungradable", "POOR"]),
    ],
    checkpoint_name="quality.ckpt",
    patient_level=False,
)


ABNORMAL = StageConfig(
    name="abnormal",
    task=StageTask.ABNORMALITY,
    labels=[
        LabelConfig(name="Normal", synonyms=["normal", "NEG"]),
        LabelConfig(name="Abnormal", synonyms=["abnormal", "POS"]),
    ],
    checkpoint_name="abnormal.ckpt",
    patient_level=True,
)


DISEASE = StageConfig(
    name="disease",
    task=StageTask.DISEASE,
    labels=[
        LabelConfig(name=label.value, synonyms=[label.name])
        for label in DiseaseLabel
    ],
    checkpoint_name="disease.ckpt",
    patient_level=True,
)
