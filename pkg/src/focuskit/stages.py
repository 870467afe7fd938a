"""Stage models of the pipeline and their training loops.

A stage model is an MLP encoder of the slice features followed by a softmax slice
head. The patient-level stages additionally pool the slice embeddings and classify
the fused embedding with a patient head.
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from .aggregate import AggregationResult, Pooler, build_pooler
from .config import AggregatorSpec, EncoderConfig, MlpSpec, StageConfig, TrainConfig
from .datamodel import Cohort, VolumeBag
from .diffkernel import (
    Adam,
    ClassWiseDense,
    Dense,
    Mlp,
    ParamTensor,
    build_mlp,
    load_parameters,
    read_topology,
    save_parameters,
    softmax,
    softmax_cross_entropy,
)
from .enums import AggregatorKind, QualityLabel, Split, StageTask
from .exceptions import (
    BackwardBeforeForward,
    CheckpointMismatch,
    DegenerateData,
    DimensionMismatch,
    EmptyBag,
    InvalidConfig,
    TrainingDiverged,
)
from .stage_configs import ABNORMAL, DISEASE, QUALITY
from .utils import derive_seed, to_jsonable

logger = logging.getLogger(__name__)


CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class StageExample:
    """The training view of one volume for a given stage.

    Attributes:
        patient_id:
            The patient identifier.
        slices:
            The slice features seen by the stage, of shape (n, D).
        slice_labels:
            The class index of every slice.
        patient_label:
            The patient class index, or None for slice-level stages.
        slice_indices:
            The indices of the slices in the original volume.
    """

    patient_id: str
    slices: np.ndarray
    slice_labels: np.ndarray
    patient_label: int | None
    slice_indices: np.ndarray


@dataclass
class StagePrediction:
    """The output of a stage model on one bag.

    Attributes:
        slice_posteriors:
            Slice class posteriors, of shape (n, K).
        patient_posterior:
            The patient class posterior, or None for slice-level stages.
        aggregation:
            The pooling result, or None for slice-level stages.
    """

    slice_posteriors: np.ndarray
    patient_posterior: np.ndarray | None = None
    aggregation: AggregationResult | None = None


@dataclass
class TrainResult:
    """A trained stage model with its loss history.

    Attributes:
        model:
            The trained model.
        history:
            One row per epoch with columns `epoch`, `train_loss` and `val_loss`. Epoch
            0 holds the losses before the first update.
    """

    model: "StageModel"
    history: pd.DataFrame


class StageModel:
    """Encoder, slice head and, for patient-level stages, pooler and patient head.

    Args:
        stage:
            The stage configuration.
        encoder_spec:
            The encoder topology. Its first width is the feature dimension.
        aggregator_spec:
            The pooler specification. Required for patient-level stages.
        seed:
            Seed of the head and pooler initialisation.

    Raises:
        InvalidConfig:
            If a patient-level stage has no aggregator specification.
    """

    def __init__(
        self,
        stage: StageConfig,
        encoder_spec: MlpSpec,
        aggregator_spec: AggregatorSpec | None = None,
        seed: int = 0,
    ):
        self.stage = stage
        self.encoder_spec = encoder_spec
        self.aggregator_spec = aggregator_spec if stage.patient_level else None
        self.seed = seed
        self.checksum: str | None = None

        self.encoder: Mlp = build_mlp(encoder_spec, name="encoder")
        embedding_dim = encoder_spec.widths[-1]
        n_classes = stage.num_labels
        self.slice_head = Dense(
            embedding_dim,
            n_classes,
            rng=np.random.default_rng(derive_seed(seed, 1)),
            name="slice_head",
        )

        self.pooler: Pooler | None = None
        self.patient_head: Dense | ClassWiseDense | None = None
        if stage.patient_level:
            if aggregator_spec is None:
                raise InvalidConfig(
                    "aggregator", f"the {stage.name} stage needs an aggregator"
                )
            self.pooler = build_pooler(
                aggregator_spec,
                dim=embedding_dim,
                n_classes=n_classes,
                seed=derive_seed(seed, 2),
            )
            head_rng = np.random.default_rng(derive_seed(seed, 3))
            if aggregator_spec.kind == AggregatorKind.CLASS_QUERY:
                self.patient_head = ClassWiseDense(
                    n_classes, embedding_dim, rng=head_rng, name="patient_head"
                )
            else:
                self.patient_head = Dense(
                    embedding_dim, n_classes, rng=head_rng, name="patient_head"
                )

        self.loss_mix = 0.5
        self._batch: list[StageExample] | None = None
        self._frozen_posteriors: list[np.ndarray] = list()

    @property
    def feature_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def n_classes(self) -> int:
        return self.stage.num_labels

    def parameters(self) -> list[ParamTensor]:
        """All parameters, in checkpoint order."""
        params = self.encoder.parameters() + self.slice_head.parameters()
        if self.pooler is not None and self.patient_head is not None:
            params += self.pooler.parameters() + self.patient_head.parameters()
        return params

    def trainable_parameters(self) -> list[ParamTensor]:
        return [param for param in self.parameters() if not param.frozen]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def freeze_encoder(self) -> None:
        for param in self.encoder.parameters():
            param.frozen = True

    @property
    def encoder_frozen(self) -> bool:
        return all(param.frozen for param in self.encoder.parameters())

    def _forward(
        self, slices: np.ndarray, posteriors: np.ndarray | None = None
    ) -> tuple[np.ndarray, AggregationResult | None, np.ndarray | None]:
        """Run the model on one bag, caching every layer for a backward pass.

        Args:
            slices:
                Slice features of shape (n, D).
            posteriors:
                Slice posteriors to pool with. Defaults to the model's own.

        Returns:
            A triple (slice_logits, aggregation, patient_logits).
        """
        slices = np.asarray(slices, dtype=np.float64)
        if slices.ndim != 2 or slices.shape[0] == 0:
            raise EmptyBag()
        if slices.shape[1] != self.feature_dim:
            raise DimensionMismatch(
                expected=self.feature_dim,
                actual=slices.shape[1],
                what=f"{self.stage.name} stage input",
            )
        embeddings = self.encoder.forward(slices)
        slice_logits = self.slice_head.forward(embeddings)
        if self.pooler is None or self.patient_head is None:
            return slice_logits, None, None

        # Certainties come from the slice posteriors without a gradient path
        if posteriors is None:
            posteriors = softmax(slice_logits)
        aggregation = self.pooler.pool(embeddings, posteriors=posteriors)
        patient_logits = self.patient_head.forward(aggregation.z)
        return slice_logits, aggregation, patient_logits

    def predict(self, slices: np.ndarray) -> StagePrediction:
        """Predict slice and patient posteriors for one bag.

        Args:
            slices:
                Slice features of shape (n, D).

        Returns:
            The stage prediction.

        Raises:
            DimensionMismatch:
                If the feature dimension does not match the model.
            EmptyBag:
                If the bag has no slices.
        """
        slice_logits, aggregation, patient_logits = self._forward(slices)
        return StagePrediction(
            slice_posteriors=softmax(slice_logits),
            patient_posterior=(
                None if patient_logits is None else softmax(patient_logits)
            ),
            aggregation=aggregation,
        )

    def _example_loss(
        self,
        example: StageExample,
        loss_mix: float,
        scale: float,
        backward: bool,
        posteriors: np.ndarray | None = None,
    ) -> float:
        slice_logits, _, patient_logits = self._forward(
            example.slices, posteriors=posteriors
        )
        slice_losses, _, slice_grad = softmax_cross_entropy(
            slice_logits, example.slice_labels
        )
        if patient_logits is None:
            slice_weight, patient_weight = 1.0, 0.0
        else:
            slice_weight, patient_weight = loss_mix, 1.0 - loss_mix

        loss = slice_weight * float(np.mean(slice_losses))
        patient_grad = None
        if patient_logits is not None:
            assert example.patient_label is not None
            patient_loss, _, patient_grad = softmax_cross_entropy(
                patient_logits, example.patient_label
            )
            loss += patient_weight * float(patient_loss)

        if backward:
            n_slices = len(slice_losses)
            grad_embeddings = self.slice_head.backward(
                slice_grad * (scale * slice_weight / n_slices)
            )
            if patient_grad is not None:
                assert self.pooler is not None and self.patient_head is not None
                grad_z = self.patient_head.backward(
                    patient_grad * (scale * patient_weight)
                )
                grad_embeddings = grad_embeddings + self.pooler.pool_backward(grad_z)
            self.encoder.backward(grad_embeddings)
        return loss

    def loss_and_backward(self, batch: list[StageExample], loss_mix: float) -> float:
        """Compute the mean loss over a batch and accumulate its gradients.

        The loss of a patient-level bag is `loss_mix` times its mean slice
        cross-entropy plus `1 - loss_mix` times its patient cross-entropy. Slice-level
        stages use the mean slice cross-entropy alone.

        Args:
            batch:
                The examples of the batch.
            loss_mix:
                The slice loss weight lambda.

        Returns:
            The mean loss over the batch.
        """
        scale = 1.0 / len(batch)
        return scale * sum(
            self._example_loss(example, loss_mix, scale=scale, backward=True)
            for example in batch
        )

    def batch_loss(self, batch: list[StageExample], loss_mix: float) -> float:
        """The mean loss over a batch, without gradients."""
        scale = 1.0 / len(batch)
        return scale * sum(
            self._example_loss(example, loss_mix, scale=scale, backward=False)
            for example in batch
        )

    def forward_loss(self, batch: list[StageExample]) -> float:
        """The batch loss with the slice posteriors fed to the pooler held fixed.

        The posteriors are taken from the first call on a batch, so that repeated
        calls under perturbed parameters see the loss whose gradient `backward`
        computes.

        Args:
            batch:
                The examples.

        Returns:
            The mean loss over the batch.
        """
        if batch is not self._batch:
            self._batch = batch
            self._frozen_posteriors = [
                softmax(self.slice_head.forward(self.encoder.forward(ex.slices)))
                for ex in batch
            ]
        scale = 1.0 / len(batch)
        return scale * sum(
            self._example_loss(
                example, self.loss_mix, scale=scale, backward=False, posteriors=post
            )
            for example, post in zip(batch, self._frozen_posteriors)
        )

    def backward(self) -> None:
        """Accumulate the gradients of the last `forward_loss` batch."""
        if self._batch is None:
            raise BackwardBeforeForward(self.stage.name)
        scale = 1.0 / len(self._batch)
        for example, post in zip(self._batch, self._frozen_posteriors):
            self._example_loss(
                example, self.loss_mix, scale=scale, backward=True, posteriors=post
            )

    def topology(self) -> dict[str, Any]:
        """The JSON topology descriptor stored next to the checkpoint."""
        return dict(
            schema_version=CHECKPOINT_SCHEMA_VERSION,
            stage=self.stage.name,
            task=self.stage.task.value,
            feature_dim=self.feature_dim,
            classes=self.stage.id2label,
            seed=self.seed,
            encoder=to_jsonable(self.encoder_spec),
            encoder_frozen=self.encoder_frozen,
            aggregator=(
                None
                if self.aggregator_spec is None
                else to_jsonable(self.aggregator_spec)
            ),
        )

    def save(self, directory: str | Path) -> str:
        """Save the model as `<stage>.ckpt` plus its `<stage>.json` topology.

        The parameters are stored as float32, so a model loaded from the checkpoint
        matches this one to the float32 rounding of its parameters, a relative error
        of at most 2**-24 per parameter. Its posteriors agree with the in-memory
        model's within 1e-5. Loading a checkpoint and saving it again gives the same
        bytes, so reloaded models reproduce each other bitwise.

        Returns:
            The SHA-256 checksum of the checkpoint.
        """
        path = Path(directory) / self.stage.checkpoint_name
        self.checksum = save_parameters(self.parameters(), path, self.topology())
        logger.debug(f"Saved the {self.stage.name} stage to {path}.")
        return self.checksum


def load_stage_model(directory: str | Path, stage: StageConfig) -> StageModel:
    """Load a stage model saved with `StageModel.save`.

    Args:
        directory:
            The directory holding the checkpoints.
        stage:
            The stage to load.

    Returns:
        The model, with its `checksum` set.

    Raises:
        CheckpointMismatch:
            If the checkpoint is missing or does not describe this stage.
    """
    path = Path(directory) / stage.checkpoint_name
    topology = read_topology(path)
    if topology.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointMismatch(
            path=path, reason=f"unsupported schema {topology.get('schema_version')}"
        )
    if topology.get("stage") != stage.name:
        raise CheckpointMismatch(
            path=path, reason=f"it holds the {topology.get('stage')!r} stage"
        )
    if topology.get("classes") != stage.id2label:
        raise CheckpointMismatch(path=path, reason="the class labels differ")
    try:
        encoder_spec = MlpSpec(**topology["encoder"])
        aggregator_spec = (
            None
            if topology["aggregator"] is None
            else AggregatorSpec(**topology["aggregator"])
        )
    except (KeyError, TypeError, ValueError, InvalidConfig) as e:
        raise CheckpointMismatch(path=path, reason=f"invalid topology: {e}")

    model = StageModel(
        stage=stage,
        encoder_spec=encoder_spec,
        aggregator_spec=aggregator_spec,
        seed=int(topology.get("seed", 0)),
    )
    if model.feature_dim != topology.get("feature_dim"):
        raise CheckpointMismatch(path=path, reason="inconsistent feature dimension")
    model.checksum = load_parameters(model.parameters(), path)
    if topology.get("encoder_frozen", False):
        model.freeze_encoder()
    return model


def stage_examples(
    stage: StageConfig,
    bags: list[VolumeBag],
    gradable_only: bool = True,
    diseased_only: bool = False,
) -> list[StageExample]:
    """Build the training view of a list of volumes for a stage.

    The quality stage sees every slice, labelled Gradable (0) or Ungradable (1). The
    abnormality stage labels slices and patients Normal (0) or Abnormal (1). The
    disease stage labels a slice with the patient disease if the slice is abnormal and
    Normal (0) otherwise.

    Args:
        stage:
            The stage.
        bags:
            The volumes.
        gradable_only:
            Whether patient-level stages only see slices labelled gradable. Volumes
            without any such slice are skipped.
        diseased_only:
            Whether the disease stage only sees abnormal patients.

    Returns:
        The examples, in input order.
    """
    examples: list[StageExample] = list()
    for bag in bags:
        if stage.task == StageTask.QUALITY:
            indices = np.arange(bag.n_slices)
            slice_labels = np.array(
                [int(q == QualityLabel.UNGRADABLE) for q in bag.slice_quality]
            )
            patient_label = None
        else:
            is_disease = stage.task == StageTask.DISEASE
            if is_disease and diseased_only and not bag.is_abnormal:
                continue
            indices = (
                np.flatnonzero(bag.gradable_mask)
                if gradable_only
                else np.arange(bag.n_slices)
            )
            if len(indices) == 0:
                continue
            abnormal = np.array(bag.slice_abnormal)[indices]
            if stage.task == StageTask.ABNORMALITY:
                slice_labels = abnormal.astype(int)
                patient_label = int(bag.is_abnormal)
            else:
                slice_labels = np.where(abnormal, bag.patient_disease.index, 0)
                patient_label = bag.patient_disease.index
        examples.append(
            StageExample(
                patient_id=bag.patient_id,
                slices=bag.slices[indices],
                slice_labels=slice_labels,
                patient_label=patient_label,
                slice_indices=indices,
            )
        )
    return examples


def _check_not_degenerate(stage: StageConfig, examples: list[StageExample]) -> None:
    """Raise `DegenerateData` if the training targets of a stage have one class."""
    if stage.patient_level:
        labels = {example.patient_label for example in examples}
    else:
        labels = {int(label) for ex in examples for label in ex.slice_labels}
    if len(labels) < 2:
        label = stage.id2label[labels.pop()] if labels else "none"
        raise DegenerateData(stage=stage.name, label=label)


def fit_stage(
    model: StageModel,
    train_examples: list[StageExample],
    val_examples: list[StageExample],
    config: TrainConfig,
) -> pd.DataFrame:
    """Train a stage model with Adam over shuffled mini-batches of bags.

    Args:
        model:
            The model to train, updated in place.
        train_examples:
            The training examples.
        val_examples:
            The validation examples. May be empty.
        config:
            The training configuration.

    Returns:
        The loss history, one row per epoch plus the initial losses as epoch 0.

    Raises:
        DegenerateData:
            If the training targets have a single class.
        TrainingDiverged:
            If a loss or gradient becomes non-finite.
    """
    _check_not_degenerate(model.stage, train_examples)
    rng = np.random.default_rng(derive_seed(config.seed or 0, 0))
    optimiser = Adam(model.trainable_parameters(), lr=config.learning_rate)

    def val_loss() -> float:
        if len(val_examples) == 0:
            return float("nan")
        return model.batch_loss(val_examples, loss_mix=config.loss_mix)

    history = [
        dict(
            epoch=0,
            train_loss=model.batch_loss(train_examples, loss_mix=config.loss_mix),
            val_loss=val_loss(),
        )
    ]
    epochs = tqdm(
        range(1, config.epochs + 1),
        desc=f"Training the {model.stage.name} stage",
        disable=not config.progress_bar,
    )
    for epoch in epochs:
        order = rng.permutation(len(train_examples))
        total_loss = 0.0
        for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
            batch_order = order[start : start + config.batch_size]
            batch = [train_examples[i] for i in batch_order]
            model.zero_grad()
            loss = model.loss_and_backward(batch, loss_mix=config.loss_mix)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch=epoch, batch=batch_idx)
            try:
                optimiser.step()
            except TrainingDiverged as e:
                raise TrainingDiverged(
                    epoch=epoch,
                    batch=batch_idx,
                    parameter=e.parameter,
                    message=f"{e.message} (epoch {epoch}, batch {batch_idx})",
                )
            total_loss += loss * len(batch)

        record = dict(
            epoch=epoch,
            train_loss=total_loss / len(train_examples),
            val_loss=val_loss(),
        )
        history.append(record)
        logger.debug(
            f"{model.stage.pretty_name.title()} epoch {epoch}: train loss "
            f"{record['train_loss']:.4f}, val loss {record['val_loss']:.4f}"
        )
    return pd.DataFrame(history)


def _encoder_spec(
    feature_dim: int, widths: list[int], encoder_config: EncoderConfig, seed: int
) -> MlpSpec:
    return MlpSpec(
        widths=[feature_dim] + list(widths),
        activation=encoder_config.activation,
        seed=derive_seed(seed, 0),
    )


def train_quality(
    cohort: Cohort,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
) -> TrainResult:
    """Train the slice-level quality gate.

    Args:
        cohort:
            The cohort, with train and validation splits.
        config:
            The training configuration.
        encoder_config:
            The encoder configuration. Defaults to `EncoderConfig()`.

    Returns:
        The trained model and its loss history.

    Raises:
        DegenerateData:
            If all training slices have the same quality label.
        TrainingDiverged:
            If the loss becomes non-finite.
    """
    encoder_config = encoder_config or EncoderConfig()
    seed = config.seed or 0
    model = StageModel(
        stage=QUALITY,
        encoder_spec=_encoder_spec(
            cohort.feature_dim,
            encoder_config.quality_hidden_widths,
            encoder_config,
            seed,
        ),
        seed=seed,
    )
    train_examples = stage_examples(QUALITY, cohort.by_split(Split.TRAIN))
    val_examples = stage_examples(QUALITY, cohort.by_split(Split.VAL))
    logger.info(
        f"Training the quality stage on {len(train_examples)} volumes for "
        f"{config.epochs} epochs."
    )
    history = fit_stage(model, train_examples, val_examples, config)
    logger.info(
        f"Finished the quality stage with train loss "
        f"{history.train_loss.iloc[-1]:.4f}."
    )
    return TrainResult(model=model, history=history)


def train_patient_stage(
    cohort: Cohort,
    task: StageTask,
    config: TrainConfig,
    aggregator: AggregatorSpec | None = None,
    encoder_config: EncoderConfig | None = None,
    shared_encoder: Mlp | None = None,
) -> TrainResult:
    """Train the abnormality or the disease stage.

    Args:
        cohort:
            The cohort, with train and validation splits.
        task:
            The task, either abnormality or disease.
        config:
            The training configuration.
        aggregator:
            The pooler specification. Defaults to `AggregatorSpec()`.
        encoder_config:
            The encoder configuration. Defaults to `EncoderConfig()`.
        shared_encoder:
            A trained encoder to copy and freeze instead of training a new one.

    Returns:
        The trained model and its loss history.

    Raises:
        ValueError:
            If the task is not a patient-level task.
        DegenerateData:
            If all training patients have the same label.
        TrainingDiverged:
            If the loss becomes non-finite.
    """
    if task == StageTask.ABNORMALITY:
        stage = ABNORMAL
    elif task == StageTask.DISEASE:
        stage = DISEASE
    else:
        raise ValueError(f"{task} is not a patient-level task.")
    aggregator = aggregator or AggregatorSpec()
    encoder_config = encoder_config or EncoderConfig()
    seed = config.seed or 0

    model = StageModel(
        stage=stage,
        encoder_spec=_encoder_spec(
            cohort.feature_dim, encoder_config.hidden_widths, encoder_config, seed
        ),
        aggregator_spec=aggregator,
        seed=seed,
    )
    if shared_encoder is not None:
        model.encoder_spec = copy.deepcopy(shared_encoder.spec)
        model.encoder = build_mlp(model.encoder_spec, name="encoder")
        model.encoder.copy_from(shared_encoder)
        model.freeze_encoder()

    def examples(split: Split) -> list[StageExample]:
        return stage_examples(
            stage,
            cohort.by_split(split),
            gradable_only=config.gradable_only,
            diseased_only=config.diseased_only,
        )

    train_examples, val_examples = examples(Split.TRAIN), examples(Split.VAL)
    logger.info(
        f"Training the {stage.name} stage with {aggregator.kind.value} pooling on "
        f"{len(train_examples)} volumes for {config.epochs} epochs."
    )
    history = fit_stage(model, train_examples, val_examples, config)
    logger.info(
        f"Finished the {stage.name} stage with train loss "
        f"{history.train_loss.iloc[-1]:.4f}."
    )
    return TrainResult(model=model, history=history)


def infer_stage(model: StageModel, bag: VolumeBag | np.ndarray) -> StagePrediction:
    """Run a stage model on a volume or on a matrix of slice features.

    Args:
        model:
            The trained model.
        bag:
            The volume, or its slice features of shape (n, D).

    Returns:
        The slice posteriors, and for patient-level stages the patient posterior and
        the pooling result.

    Raises:
        DimensionMismatch:
            If the feature dimension does not match the model.
    """
    slices = bag.slices if isinstance(bag, VolumeBag) else bag
    return model.predict(slices)
