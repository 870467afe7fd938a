"""Multiple instance poolers fusing slice embeddings into a patient embedding."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import AggregatorSpec
from .diffkernel import (
    ParamTensor,
    entropy,
    glorot_uniform,
    softmax,
    softmax_backward,
    weighted_sum,
    weighted_sum_backward,
)
from .enums import AggregatorKind
from .exceptions import (
    BackwardBeforeForward,
    DimensionMismatch,
    EmptyBag,
    InvalidPosteriors,
)

logger = logging.getLogger(__name__)


POSTERIOR_TOLERANCE = 1e-6


@dataclass
class AggregationResult:
    """The output of a pooler.

    Attributes:
        z:
            The fused embedding, of shape (d,), or (K, d) for class-query pooling.
        weights:
            The slice weights, a probability vector of length n. For class-query
            pooling this is the mean of the per-class weights.
        certainties:
            Slice certainties in [0, 1], of length n.
        attention_scores:
            The raw slice scores before normalisation, of length n.
        class_weights:
            The per-class slice weights of shape (K, n), for class-query pooling only.
    """

    z: np.ndarray
    weights: np.ndarray
    certainties: np.ndarray
    attention_scores: np.ndarray
    class_weights: np.ndarray | None = None

    @property
    def n_slices(self) -> int:
        return len(self.weights)


def validate_posteriors(posteriors: np.ndarray, n_slices: int | None = None) -> None:
    """Check that slice posteriors form a row-stochastic matrix.

    Args:
        posteriors:
            Array of shape (n, K).
        n_slices:
            The expected number of rows, if known.

    Raises:
        InvalidPosteriors:
            If the array has the wrong shape, or a row is negative or does not sum
            to 1.
    """
    if posteriors.ndim != 2:
        raise InvalidPosteriors(
            f"Slice posteriors must be a matrix, got shape {posteriors.shape}."
        )
    if n_slices is not None and posteriors.shape[0] != n_slices:
        raise InvalidPosteriors(
            f"Got {posteriors.shape[0]} posterior rows for {n_slices} slices."
        )
    if not np.all(np.isfinite(posteriors)) or np.any(posteriors < 0):
        raise InvalidPosteriors("Slice posteriors must be finite and non-negative.")
    if np.any(np.abs(posteriors.sum(axis=1) - 1.0) > POSTERIOR_TOLERANCE):
        raise InvalidPosteriors("Every slice posterior must sum to 1.")


def certainty(p: np.ndarray, n_classes: int | None = None) -> np.ndarray | float:
    """Certainty of class posteriors, one minus the entropy normalised by log K.

    Args:
        p:
            A probability vector of length K, or a matrix with one posterior per row.
        n_classes:
            The number of classes K. Defaults to the length of the posteriors.

    Returns:
        The certainty in [0, 1]; a float for a vector, an array for a matrix.

    Raises:
        ValueError:
            If K is smaller than 2.
        InvalidPosteriors:
            If a posterior is not a probability vector of length K.

    Examples:
        >>> round(float(certainty([0.99, 0.01])), 4)
        0.9192
        >>> round(float(certainty([0.25, 0.25, 0.25, 0.25])), 12)
        0.0
    """
    p = np.asarray(p, dtype=np.float64)
    n_classes = p.shape[-1] if n_classes is None else n_classes
    if n_classes < 2:
        raise ValueError(f"The certainty needs at least 2 classes, got {n_classes}.")
    if p.shape[-1] != n_classes:
        raise InvalidPosteriors(
            f"Expected posteriors over {n_classes} classes, got {p.shape[-1]}."
        )
    validate_posteriors(np.atleast_2d(p))
    values = np.clip(1.0 - entropy(p) / np.log(n_classes), 0.0, 1.0)
    if values.ndim == 0:
        return float(values)
    return values


class _TanhScorer:
    """Slice scores e_i = v^T tanh(W^T h_i)."""

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator, name: str):
        self.weight = ParamTensor(
            f"{name}.W", glorot_uniform(rng, dim, hidden_dim, (dim, hidden_dim))
        )
        self.vector = ParamTensor(
            f"{name}.v", glorot_uniform(rng, hidden_dim, 1, (hidden_dim,))
        )
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def parameters(self) -> list[ParamTensor]:
        return [self.weight, self.vector]

    def forward(self, h: np.ndarray) -> np.ndarray:
        a = np.tanh(h @ self.weight.values)
        self._cache = (h, a)
        return a @ self.vector.values

    def backward(self, grad_scores: np.ndarray) -> np.ndarray:
        assert self._cache is not None
        h, a = self._cache
        self._cache = None
        self.vector.grad += a.T @ grad_scores
        grad_pre = np.outer(grad_scores, self.vector.values) * (1.0 - a**2)
        self.weight.grad += h.T @ grad_pre
        return grad_pre @ self.weight.values.T


class _GatedScorer:
    """Slice scores e_i = v^T (tanh(W^T h_i) * sigmoid(U^T h_i))."""

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator, name: str):
        self.weight = ParamTensor(
            f"{name}.W", glorot_uniform(rng, dim, hidden_dim, (dim, hidden_dim))
        )
        self.gate = ParamTensor(
            f"{name}.U", glorot_uniform(rng, dim, hidden_dim, (dim, hidden_dim))
        )
        self.vector = ParamTensor(
            f"{name}.v", glorot_uniform(rng, hidden_dim, 1, (hidden_dim,))
        )
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def parameters(self) -> list[ParamTensor]:
        return [self.weight, self.gate, self.vector]

    def forward(self, h: np.ndarray) -> np.ndarray:
        a = np.tanh(h @ self.weight.values)
        g = expit(h @ self.gate.values)
        self._cache = (h, a, g)
        return (a * g) @ self.vector.values

    def backward(self, grad_scores: np.ndarray) -> np.ndarray:
        assert self._cache is not None
        h, a, g = self._cache
        self._cache = None
        self.vector.grad += (a * g).T @ grad_scores
        grad_gated = np.outer(grad_scores, self.vector.values)
        grad_pre_a = grad_gated * g * (1.0 - a**2)
        grad_pre_g = grad_gated * a * g * (1.0 - g)
        self.weight.grad += h.T @ grad_pre_a
        self.gate.grad += h.T @ grad_pre_g
        return grad_pre_a @ self.weight.values.T + grad_pre_g @ self.gate.values.T


class Pooler(ABC):
    """Base class of the poolers.

    Args:
        spec:
            The aggregator specification.
        dim:
            The slice embedding dimension d.
        n_classes:
            The number of classes K of the stage.
        rng:
            Generator for the parameter initialisation.
    """

    kind: AggregatorKind

    def __init__(
        self,
        spec: AggregatorSpec,
        dim: int,
        n_classes: int,
        rng: np.random.Generator,
    ):
        self.spec = spec
        self.dim = dim
        self.n_classes = n_classes
        self._cache: dict | None = None

    @property
    def name(self) -> str:
        return f"pool.{self.kind.value}"

    def parameters(self) -> list[ParamTensor]:
        return list()

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def pool(
        self, h: np.ndarray, posteriors: np.ndarray | None = None
    ) -> AggregationResult:
        """Fuse slice embeddings into one patient embedding.

        Args:
            h:
                Slice embeddings of shape (n, d).
            posteriors:
                Optional slice class posteriors of shape (n, K).

        Returns:
            The aggregation result.

        Raises:
            EmptyBag:
                If there are no slices.
            DimensionMismatch:
                If the embedding dimension is not d.
            InvalidPosteriors:
                If the posteriors are not row-stochastic.
        """
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] == 0:
            raise EmptyBag()
        if h.shape[1] != self.dim:
            raise DimensionMismatch(
                expected=self.dim, actual=h.shape[1], what=f"{self.name} input"
            )
        if posteriors is not None:
            posteriors = np.asarray(posteriors, dtype=np.float64)
            validate_posteriors(posteriors, n_slices=h.shape[0])
            certainties = np.asarray(certainty(posteriors), dtype=np.float64)
        else:
            certainties = np.ones(h.shape[0])
        return self._pool(h, posteriors=posteriors, certainties=certainties)

    @abstractmethod
    def _pool(
        self, h: np.ndarray, posteriors: np.ndarray | None, certainties: np.ndarray
    ) -> AggregationResult:
        ...

    def pool_backward(self, grad_z: np.ndarray) -> np.ndarray:
        """Backpropagate through the last `pool` call.

        Args:
            grad_z:
                The gradient of the loss with respect to the fused embedding.

        Returns:
            The gradient with respect to the slice embeddings, of shape (n, d).
            Parameter gradients are accumulated in place.

        Raises:
            BackwardBeforeForward:
                If no forward pass is cached.
        """
        if self._cache is None:
            raise BackwardBeforeForward(self.name)
        cache, self._cache = self._cache, None
        return self._pool_backward(np.asarray(grad_z, dtype=np.float64), cache)

    @abstractmethod
    def _pool_backward(self, grad_z: np.ndarray, cache: dict) -> np.ndarray:
        ...


class MeanPooler(Pooler):
    kind = AggregatorKind.MEAN

    def _pool(self, h, posteriors, certainties):
        n = h.shape[0]
        weights = np.full(n, 1.0 / n)
        self._cache = dict(n=n)
        return AggregationResult(
            z=h.mean(axis=0),
            weights=weights,
            certainties=certainties,
            attention_scores=np.zeros(n),
        )

    def _pool_backward(self, grad_z, cache):
        return np.tile(grad_z / cache["n"], (cache["n"], 1))


class MaxPooler(Pooler):
    """Elementwise max pooling. Weights are reported as uniform by convention, and
    gradients flow to the first maximal slice of every dimension."""

    kind = AggregatorKind.MAX

    def _pool(self, h, posteriors, certainties):
        n = h.shape[0]
        argmax = np.argmax(h, axis=0)
        self._cache = dict(argmax=argmax, shape=h.shape)
        return AggregationResult(
            z=h.max(axis=0),
            weights=np.full(n, 1.0 / n),
            certainties=certainties,
            attention_scores=np.zeros(n),
        )

    def _pool_backward(self, grad_z, cache):
        grad_h = np.zeros(cache["shape"])
        grad_h[cache["argmax"], np.arange(cache["shape"][1])] = grad_z
        return grad_h


class AttentionPooler(Pooler):
    """Attention pooling w = softmax(v^T tanh(W^T h_i)), optionally gated."""

    kind = AggregatorKind.ATTENTION
    gated = False

    def __init__(self, spec, dim, n_classes, rng):
        super().__init__(spec, dim=dim, n_classes=n_classes, rng=rng)
        scorer_cls = _GatedScorer if self.gated else _TanhScorer
        self.scorer = scorer_cls(dim, spec.hidden_dim, rng=rng, name=self.name)

    def parameters(self) -> list[ParamTensor]:
        return self.scorer.parameters()

    def _weights(self, scores: np.ndarray, certainties: np.ndarray) -> np.ndarray:
        return softmax(scores)

    def _pool(self, h, posteriors, certainties):
        scores = self.scorer.forward(h)
        weights = self._weights(scores, certainties)
        self._cache = dict(h=h, weights=weights)
        return AggregationResult(
            z=weighted_sum(weights, h),
            weights=weights,
            certainties=certainties,
            attention_scores=scores,
        )

    def _pool_backward(self, grad_z, cache):
        grad_weights, grad_h = weighted_sum_backward(
            cache["weights"], cache["h"], grad_z
        )
        grad_scores = softmax_backward(cache["weights"], grad_weights)
        return grad_h + self.scorer.backward(grad_scores)


class GatedAttentionPooler(AttentionPooler):
    kind = AggregatorKind.GATED_ATTENTION
    gated = True


class UAACPooler(AttentionPooler):
    """Uncertainty-aware attention pooling.

    The slice weights are w_i = u_i / sum_j u_j with
    u_i = exp(e_i - max_j e_j) * (c_i + eps), where e_i is the (gated) attention score
    and c_i the certainty of the slice posterior. Certainties are constants for the
    backward pass.
    """

    kind = AggregatorKind.UAAC

    def __init__(self, spec, dim, n_classes, rng):
        self.gated = spec.gated
        super().__init__(spec, dim=dim, n_classes=n_classes, rng=rng)

    def pool(
        self, h: np.ndarray, posteriors: np.ndarray | None = None
    ) -> AggregationResult:
        if self.spec.uncertainty_enabled:
            if posteriors is None:
                raise InvalidPosteriors(
                    "Uncertainty-aware pooling requires slice posteriors."
                )
            n_posterior_classes = np.shape(posteriors)[-1]
            if n_posterior_classes != self.n_classes:
                raise DimensionMismatch(
                    expected=self.n_classes,
                    actual=n_posterior_classes,
                    what="slice posterior classes",
                )
        return super().pool(h, posteriors=posteriors)

    def _weights(self, scores: np.ndarray, certainties: np.ndarray) -> np.ndarray:
        unnormalised = np.exp(scores - np.max(scores))
        if self.spec.uncertainty_enabled:
            unnormalised = unnormalised * (certainties + self.spec.certainty_floor)
        return unnormalised / np.sum(unnormalised)


class ClassQueryPooler(Pooler):
    """Learned per-class queries attending over the slices.

    Class k pools with weights softmax_i(q_k^T h_i), giving one embedding per class.
    """

    kind = AggregatorKind.CLASS_QUERY

    def __init__(self, spec, dim, n_classes, rng):
        super().__init__(spec, dim=dim, n_classes=n_classes, rng=rng)
        self.queries = ParamTensor(
            f"{self.name}.Q", glorot_uniform(rng, dim, n_classes, (n_classes, dim))
        )

    def parameters(self) -> list[ParamTensor]:
        return [self.queries]

    def _pool(self, h, posteriors, certainties):
        scores = self.queries.values @ h.T
        class_weights = softmax(scores, axis=1)
        self._cache = dict(h=h, class_weights=class_weights)
        return AggregationResult(
            z=class_weights @ h,
            weights=class_weights.mean(axis=0),
            certainties=certainties,
            attention_scores=scores.mean(axis=0),
            class_weights=class_weights,
        )

    def _pool_backward(self, grad_z, cache):
        h, class_weights = cache["h"], cache["class_weights"]
        grad_h = class_weights.T @ grad_z
        grad_scores = softmax_backward(class_weights, grad_z @ h.T)
        self.queries.grad += grad_scores @ h
        return grad_h + grad_scores.T @ self.queries.values


POOLERS: dict[AggregatorKind, type[Pooler]] = {
    cls.kind: cls
    for cls in [
        MeanPooler,
        MaxPooler,
        AttentionPooler,
        GatedAttentionPooler,
        ClassQueryPooler,
        UAACPooler,
    ]
}


def build_pooler(
    spec: AggregatorSpec, dim: int, n_classes: int | None = None, seed: int = 0
) -> Pooler:
    """Build the pooler described by an aggregator specification.

    Args:
        spec:
            The aggregator specification.
        dim:
            The slice embedding dimension.
        n_classes:
            The number of classes of the stage. Defaults to `spec.n_classes`.
        seed:
            Seed of the parameter initialisation.

    Returns:
        The pooler.
    """
    n_classes = n_classes if n_classes is not None else spec.n_classes
    if n_classes is None:
        raise ValueError("The number of classes of the pooler is unknown.")
    if spec.n_classes is not None and spec.n_classes != n_classes:
        raise DimensionMismatch(
            expected=spec.n_classes, actual=n_classes, what="aggregator classes"
        )
    rng = np.random.default_rng(seed)
    return POOLERS[spec.kind](spec, dim=dim, n_classes=n_classes, rng=rng)


def pool(
    aggregator: Pooler, h: np.ndarray, posteriors: np.ndarray | None = None
) -> AggregationResult:
    """Pool slice embeddings with an aggregator. See `Pooler.pool`."""
    return aggregator.pool(h, posteriors=posteriors)


def pool_backward(aggregator: Pooler, grad_z: np.ndarray) -> np.ndarray:
    """Backpropagate through an aggregator. See `Pooler.pool_backward`."""
    return aggregator.pool_backward(grad_z)
