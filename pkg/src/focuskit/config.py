"""Configuration dataclasses."""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .enums import Activation, AggregatorKind, GroupBy, OutputActivation, StageTask
from .exceptions import InvalidCohortSpec, InvalidConfig
from .utils import to_jsonable

N_DISEASE_CLASSES = 9

SEED_ENV_VAR = "FOCUSKIT_SEED"


@dataclass
class LabelConfig:
    """Configuration for a label of a stage.

    Attributes:
        name:
            The name of the label.
        synonyms:
            The synonyms of the label.
    """

    name: str
    synonyms: list[str]


@dataclass
class MetricConfig:
    """Configuration for a metric.

    Attributes:
        name:
            The name of the metric.
        pretty_name:
            A longer prettier name for the metric, which allows cases and spaces. Used
            for logging.
        results_key:
            The key of the metric in a serialised evaluation summary.
        postprocessing_fn:
            A function that is applied to the metric score before it is displayed.
            Must take a single float as input and return a single string.
    """

    name: str
    pretty_name: str
    results_key: str
    postprocessing_fn: Callable[[float], str]


@dataclass
class StageConfig:
    """Configuration for a stage of the diagnostic pipeline.

    Attributes:
        name:
            The name of the stage. Must be lower case with no spaces.
        task:
            The task solved by the stage.
        labels:
            The classes predicted by the stage, in index order.
        checkpoint_name:
            The file name of the stage checkpoint.
        patient_level:
            Whether the stage pools slices into a patient-level prediction.
        id2label:
            The mapping from ID to label.
        label2id:
            The mapping from label to ID. This includes all label synonyms as well.
        num_labels:
            The number of labels of the stage.
    """

    name: str
    task: StageTask
    labels: list[LabelConfig]
    checkpoint_name: str
    patient_level: bool

    @property
    def pretty_name(self) -> str:
        return self.name.replace("-", " ")

    @property
    def id2label(self) -> list[str]:
        return [label.name for label in self.labels]

    @property
    def label2id(self) -> dict[str, int]:
        return {
            syn: idx
            for idx, label in enumerate(self.labels)
            for syn in [label.name] + label.synonyms
        }

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def topology_name(self) -> str:
        return Path(self.checkpoint_name).with_suffix(".json").name


@dataclass
class CenterShift:
    """Simulated domain shift of one imaging center.

    Attributes:
        center_id:
            The identifier of the center.
        feature_scale:
            Multiplicative scale applied to every feature. Must be positive.
        feature_offset:
            Additive offset, a vector of length D. A scalar is broadcast to length D
            by the owning `CohortSpec`.
        noise_sigma:
            Standard deviation of the additive Gaussian noise. Must be non-negative.
    """

    center_id: str
    feature_scale: float = 1.0
    feature_offset: list[float] | float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.feature_scale > 0:
            raise InvalidCohortSpec(
                f"Center {self.center_id!r} has a non-positive feature scale "
                f"{self.feature_scale}."
            )
        if not self.noise_sigma >= 0:
            raise InvalidCohortSpec(
                f"Center {self.center_id!r} has a negative noise sigma "
                f"{self.noise_sigma}."
            )
        offset = np.atleast_1d(np.asarray(self.feature_offset, dtype=float))
        if not np.all(np.isfinite(offset)):
            raise InvalidCohortSpec(
                f"Center {self.center_id!r} has a non-finite feature offset."
            )

    @property
    def offset_vector(self) -> np.ndarray:
        return np.asarray(self.feature_offset, dtype=float)


def default_centers(feature_dim: int) -> list[CenterShift]:
    """The four mildly shifted centers used by the default cohort.

    Args:
        feature_dim:
            The feature dimension D.

    Returns:
        The center shifts.
    """
    ramp = np.linspace(-1.0, 1.0, feature_dim)
    return [
        CenterShift(center_id="C0", feature_scale=1.0, feature_offset=0.0),
        CenterShift(
            center_id="C1",
            feature_scale=0.95,
            feature_offset=(0.1 * ramp).tolist(),
            noise_sigma=0.1,
        ),
        CenterShift(
            center_id="C2",
            feature_scale=1.05,
            feature_offset=(-0.1 * ramp).tolist(),
            noise_sigma=0.1,
        ),
        CenterShift(
            center_id="C3", feature_scale=1.1, feature_offset=0.15, noise_sigma=0.2
        ),
    ]


@dataclass
class CohortSpec:
    """Specification of a synthetic cohort.

    Attributes:
        n_patients:
            The number of patients.
        slices_per_volume:
            The number of slices n in every volume.
        feature_dim:
            The feature dimension D. Must be at least the number of diseases.
        class_prevalence:
            Probability of each of the 9 disease labels, Normal first.
        lesion_fraction:
            The fraction rho of slices carrying the lesion in a diseased volume.
        lesion_margin:
            The feature-space shift delta of a lesion slice along its class direction.
        ungradable_slice_rate:
            Probability q that a slice is ungradable.
        centers:
            The imaging centers. Patients are assigned round-robin. Defaults to
            `default_centers(feature_dim)`.
        seed:
            The generator seed. If None, the global seed of the run is used.
        train_frac:
            Fraction of (internal) patients in the training split.
        val_frac:
            Fraction of (internal) patients in the validation split.
        external_centers:
            Centers held out from development, whose patients all go to the test
            split.
    """

    n_patients: int = 350
    slices_per_volume: int = 32
    feature_dim: int = 16
    class_prevalence: list[float] = field(
        default_factory=lambda: [0.2] + [0.1] * (N_DISEASE_CLASSES - 1)
    )
    lesion_fraction: float = 0.1
    lesion_margin: float = 4.0
    ungradable_slice_rate: float = 0.15
    centers: list[CenterShift] | None = None
    seed: int | None = None
    train_frac: float = 4 / 7
    val_frac: float = 1 / 7
    external_centers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_patients < 1:
            raise InvalidCohortSpec("The number of patients must be positive.")
        if self.slices_per_volume < 1:
            raise InvalidCohortSpec("The number of slices must be positive.")
        if self.feature_dim < N_DISEASE_CLASSES - 1:
            raise InvalidCohortSpec(
                f"The feature dimension must be at least {N_DISEASE_CLASSES - 1} to "
                f"hold one lesion direction per disease, got {self.feature_dim}."
            )
        prevalence = np.asarray(self.class_prevalence, dtype=float)
        if len(prevalence) != N_DISEASE_CLASSES:
            raise InvalidCohortSpec(
                f"The class prevalence must have {N_DISEASE_CLASSES} entries, got "
                f"{len(prevalence)}."
            )
        if np.any(prevalence < 0) or abs(prevalence.sum() - 1.0) > 1e-9:
            raise InvalidCohortSpec(
                "The class prevalence must be non-negative and sum to 1."
            )
        if not 0 < self.lesion_fraction <= 1:
            raise InvalidCohortSpec("The lesion fraction must lie in (0, 1].")
        if not self.lesion_margin > 0:
            raise InvalidCohortSpec("The lesion margin must be positive.")
        if not 0 <= self.ungradable_slice_rate < 1:
            raise InvalidCohortSpec("The ungradable slice rate must lie in [0, 1).")
        if not (
            self.train_frac >= 0
            and self.val_frac >= 0
            and self.train_frac + self.val_frac < 1
        ):
            raise InvalidCohortSpec(
                "The train and validation fractions must be non-negative and sum to "
                "less than 1."
            )

        if self.centers is None:
            self.centers = default_centers(self.feature_dim)
        self.centers = [
            CenterShift(**center) if isinstance(center, dict) else center
            for center in self.centers
        ]
        if len(self.centers) == 0:
            raise InvalidCohortSpec("At least one center is required.")
        center_ids = [center.center_id for center in self.centers]
        if len(set(center_ids)) != len(center_ids):
            raise InvalidCohortSpec(f"Duplicate center IDs in {center_ids}.")
        for center in self.centers:
            offset = np.asarray(center.feature_offset, dtype=float)
            if offset.ndim == 0:
                center.feature_offset = [float(offset)] * self.feature_dim
            elif offset.shape != (self.feature_dim,):
                raise InvalidCohortSpec(
                    f"Center {center.center_id!r} has an offset of length "
                    f"{offset.size}, expected {self.feature_dim}."
                )
            else:
                center.feature_offset = offset.tolist()

        unknown = sorted(set(self.external_centers) - set(center_ids))
        if unknown:
            raise InvalidCohortSpec(f"Unknown external centers {unknown}.")
        if set(self.external_centers) == set(center_ids):
            raise InvalidCohortSpec("At least one center must be internal.")

    @property
    def n_lesion_slices(self) -> int:
        """The number of lesion slices in a diseased volume, max(1, round(rho * n))."""
        rounded = math.floor(self.lesion_fraction * self.slices_per_volume + 0.5)
        return min(self.slices_per_volume, max(1, rounded))


@dataclass
class MlpSpec:
    """Topology of a multilayer perceptron.

    Attributes:
        widths:
            Layer widths, input first. Must contain at least two positive entries.
        activation:
            Nonlinearity between layers.
        output_activation:
            Activation applied to the final layer.
        seed:
            Seed of the weight initialisation.
    """

    widths: list[int]
    activation: Activation = Activation.RELU
    output_activation: OutputActivation = OutputActivation.NONE
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise InvalidConfig("mlp", "an MLP needs at least one layer")
        if any(width < 1 for width in self.widths):
            raise InvalidConfig("mlp", f"widths must be positive, got {self.widths}")
        self.activation = Activation(self.activation)
        self.output_activation = OutputActivation(self.output_activation)


@dataclass
class EncoderConfig:
    """Configuration of the slice encoders standing in for the foundation model.

    Attributes:
        hidden_widths:
            Widths of the abnormality/disease encoder after the input layer. The last
            entry is the embedding dimension.
        quality_hidden_widths:
            Widths of the quality-gate encoder after the input layer.
        activation:
            Nonlinearity between encoder layers.
        share_encoder:
            Whether the disease stage reuses (and freezes) the abnormality encoder.
    """

    hidden_widths: list[int] = field(default_factory=lambda: [64, 32])
    quality_hidden_widths: list[int] = field(default_factory=lambda: [64, 32])
    activation: Activation = Activation.RELU
    share_encoder: bool = True

    def __post_init__(self):
        self.activation = Activation(self.activation)
        for name in ["hidden_widths", "quality_hidden_widths"]:
            widths = getattr(self, name)
            if len(widths) == 0 or any(width < 1 for width in widths):
                raise InvalidConfig(
                    "encoder", f"{name} must be a non-empty list of positive widths"
                )


@dataclass
class AggregatorSpec:
    """Specification of a slice pooler.

    Attributes:
        kind:
            The pooling operator.
        hidden_dim:
            The attention hidden dimension L.
        certainty_floor:
            The floor epsilon added to slice certainties in UAAC.
        uncertainty_enabled:
            Whether UAAC multiplies attention by certainty. Only used by UAAC.
        gated:
            Whether UAAC scores slices with gated attention (otherwise tanh attention).
        n_classes:
            Number of classes K, for the certainty normalisation and the class
            queries. If None, the number of classes of the stage is used.
    """

    kind: AggregatorKind = AggregatorKind.UAAC
    hidden_dim: int = 64
    certainty_floor: float = 0.01
    uncertainty_enabled: bool = True
    gated: bool = True
    n_classes: int | None = None

    def __post_init__(self):
        self.kind = AggregatorKind(self.kind)
        if not self.certainty_floor > 0:
            raise InvalidConfig("aggregator", "the certainty floor must be positive")
        if self.hidden_dim < 1:
            raise InvalidConfig("aggregator", "the hidden dimension must be positive")
        if self.n_classes is not None and self.n_classes < 2:
            raise InvalidConfig("aggregator", "at least two classes are required")


@dataclass
class TrainConfig:
    """Training configuration of a single stage.

    Attributes:
        epochs:
            Number of passes over the training bags.
        batch_size:
            Number of bags per optimiser step.
        learning_rate:
            Adam learning rate.
        seed:
            Seed of the initialisation and the bag shuffling. If None, derived from
            the global seed of the run.
        loss_mix:
            Weight lambda of the slice-level loss; the patient-level loss gets
            1 - lambda.
        gradable_only:
            Whether patient stages train only on slices labelled gradable.
        diseased_only:
            Whether the disease stage trains only on abnormal patients.
        progress_bar:
            Whether to show a progress bar.
    """

    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 5e-3
    seed: int | None = None
    loss_mix: float = 0.5
    gradable_only: bool = True
    diseased_only: bool = False
    progress_bar: bool = field(default=False, metadata=dict(serialise=False))

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("train", "epochs must be at least 1")
        if self.batch_size < 1:
            raise InvalidConfig("train", "the batch size must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("train", "the learning rate must be positive")
        if not 0 <= self.loss_mix <= 1:
            raise InvalidConfig("train", "the loss mix must lie in [0, 1]")


@dataclass
class PipelineConfig:
    """Thresholds and routing options of the diagnostic pipeline.

    Attributes:
        gradable_fraction_threshold:
            Minimum fraction tau_q of gradable slices for a volume to be diagnosed.
        abnormal_threshold:
            Minimum abnormality probability tau_a for a volume to be diagnosed.
        evidence_top_k:
            Number of evidence slices in a report.
        drop_ungradable_slices:
            Whether the later stages only see gradable slices.
    """

    gradable_fraction_threshold: float = 0.5
    abnormal_threshold: float = 0.5
    evidence_top_k: int = 5
    drop_ungradable_slices: bool = True

    def __post_init__(self):
        if not 0 < self.gradable_fraction_threshold <= 1:
            raise InvalidConfig(
                "pipeline", "the gradable fraction threshold must lie in (0, 1]"
            )
        if not 0 < self.abnormal_threshold < 1:
            raise InvalidConfig("pipeline", "the abnormal threshold must lie in (0, 1)")
        if self.evidence_top_k < 1:
            raise InvalidConfig("pipeline", "evidence_top_k must be positive")


@dataclass
class EvalConfig:
    """Evaluation configuration.

    Attributes:
        bootstrap_resamples:
            Number of bootstrap resamples B for confidence intervals.
        group_by:
            How to group the summaries.
        seed:
            Seed of the bootstrap. If None, the global seed of the run is used.
    """

    bootstrap_resamples: int = 1000
    group_by: GroupBy = GroupBy.ALL
    seed: int | None = None

    def __post_init__(self):
        self.group_by = GroupBy(self.group_by)
        if self.bootstrap_resamples < 1:
            raise InvalidConfig("eval", "the number of resamples must be positive")


STAGE_NAMES = ["quality", "abnormal", "disease"]


@dataclass
class RunConfig:
    """The full configuration of a run.

    Attributes:
        synth:
            The synthetic cohort specification.
        train:
            Training configuration per stage name ("quality", "abnormal",
            "disease").
        encoder:
            The encoder configuration.
        aggregator:
            The aggregator specification of the patient-level stages.
        pipeline:
            The pipeline configuration.
        eval:
            The evaluation configuration.
        seed:
            The global seed, used for every section seed left unset.
        output_dir:
            The default output directory.
    """

    synth: CohortSpec = field(default_factory=CohortSpec)
    train: dict[str, TrainConfig] = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 42
    output_dir: str = "focuskit_output"

    def __post_init__(self):
        if self.seed < 0:
            raise InvalidConfig("seed", "the seed must be non-negative")
        unknown = sorted(set(self.train) - set(STAGE_NAMES))
        if unknown:
            raise InvalidConfig("train", f"unknown stages {unknown}")
        for offset, stage_name in enumerate(STAGE_NAMES, start=1):
            train_config = self.train.setdefault(stage_name, TrainConfig())
            if train_config.seed is None:
                train_config.seed = self.seed + offset
        if self.synth.seed is None:
            self.synth.seed = self.seed
        if self.eval.seed is None:
            self.eval.seed = self.seed

    @classmethod
    def from_dict(
        cls, data: dict[str, Any], environ: dict[str, str] | None = None
    ) -> "RunConfig":
        """Build a run configuration from a parsed JSON document.

        Args:
            data:
                The parsed document.
            environ:
                The environment used to look up the seed override. Defaults to
                `os.environ`.

        Returns:
            The validated run configuration.

        Raises:
            InvalidConfig:
                If a section has unknown keys or invalid values.
        """
        environ = dict(os.environ) if environ is None else environ
        data = _check_keys(cls, data, section="run")

        seed_override = environ.get(SEED_ENV_VAR)
        if seed_override is not None:
            try:
                data["seed"] = int(seed_override)
            except ValueError:
                raise InvalidConfig(SEED_ENV_VAR, f"not an integer: {seed_override!r}")

        kwargs: dict[str, Any] = dict()
        if "synth" in data:
            kwargs["synth"] = _parse_section(
                CohortSpec,
                data["synth"],
                section="synth",
                converters=dict(
                    centers=lambda centers: [
                        _parse_section(CenterShift, c, section="synth.centers")
                        for c in centers
                    ]
                ),
            )
        if "train" in data:
            if not isinstance(data["train"], dict):
                raise InvalidConfig("train", "expected a JSON object of stages")
            kwargs["train"] = {
                name: _parse_section(TrainConfig, section, section=f"train.{name}")
                for name, section in data["train"].items()
            }
        for name, section_cls in [
            ("encoder", EncoderConfig),
            ("aggregator", AggregatorSpec),
            ("pipeline", PipelineConfig),
            ("eval", EvalConfig),
        ]:
            if name in data:
                kwargs[name] = _parse_section(section_cls, data[name], section=name)
        for name in ["seed", "output_dir"]:
            if name in data:
                kwargs[name] = data[name]

        if seed_override is not None:
            for name in ["synth", "eval"]:
                if name in kwargs:
                    kwargs[name].seed = None
            for train_config in kwargs.get("train", dict()).values():
                train_config.seed = None

        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidConfig("run", str(e))

    def to_dict(self) -> dict[str, Any]:
        """The effective configuration as plain JSON types."""
        return to_jsonable(self)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load a run configuration from a JSON file.

    Args:
        path:
            Path to the JSON file. If None, the default configuration is used.

    Returns:
        The run configuration.

    Raises:
        InvalidConfig:
            If the file is not valid JSON or fails validation.
    """
    if path is None:
        return RunConfig.from_dict(dict())
    try:
        with Path(path).open(encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidConfig("run", f"{path} is not valid JSON: {e}")
    return RunConfig.from_dict(data)


def _check_keys(cls: type, data: Any, section: str) -> dict[str, Any]:
    """Check that a section is an object whose keys are fields of `cls`."""
    if not isinstance(data, dict):
        raise InvalidConfig(section, "expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(section, f"unknown keys {unknown}")
    return dict(data)


def _parse_section(
    cls: type,
    data: Any,
    section: str,
    converters: dict[str, Callable[[Any], Any]] | None = None,
) -> Any:
    """Build the dataclass `cls` from a JSON section, rejecting unknown keys."""
    kwargs = _check_keys(cls, data, section=section)
    for key, converter in (converters or dict()).items():
        if key in kwargs:
            kwargs[key] = converter(kwargs[key])
    try:
        return cls(**kwargs)
    except InvalidCohortSpec as e:
        raise InvalidConfig(section, e.message)
    except (TypeError, ValueError) as e:
        raise InvalidConfig(section, str(e))
