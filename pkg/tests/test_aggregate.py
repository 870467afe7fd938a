"""Unit tests for the `aggregate` module."""

import numpy as np
import pytest

from focuskit.aggregate import (
    AttentionPooler,
    ClassQueryPooler,
    GatedAttentionPooler,
    MaxPooler,
    MeanPooler,
    UAACPooler,
    build_pooler,
    certainty,
    pool,
    pool_backward,
)
from focuskit.config import AggregatorSpec
from focuskit.diffkernel import ParamTensor, grad_check
from focuskit.enums import AggregatorKind
from focuskit.exceptions import (
    BackwardBeforeForward,
    DimensionMismatch,
    EmptyBag,
    InvalidPosteriors,
)

DIM = 4
N_CLASSES = 3


def make_pooler(kind: AggregatorKind, seed: int = 0, **spec_kwargs):
    spec = AggregatorSpec(kind=kind, hidden_dim=5, **spec_kwargs)
    return build_pooler(spec, dim=DIM, n_classes=N_CLASSES, seed=seed)


def random_posteriors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(N_CLASSES), size=n)


class PoolerLoss:
    """Linear loss sum(r * z) of a pooler, differentiable in the slice embeddings."""

    def __init__(self, pooler, h: np.ndarray, posteriors, readout: np.ndarray):
        self.pooler = pooler
        self.h = ParamTensor("h", h)
        self.posteriors = posteriors
        self.readout = readout

    def parameters(self):
        return [self.h] + self.pooler.parameters()

    def forward_loss(self, batch):
        result = self.pooler.pool(self.h.values, posteriors=self.posteriors)
        return float(np.sum(self.readout * result.z))

    def backward(self):
        self.h.grad += self.pooler.pool_backward(self.readout)


class TestCertainty:
    def test_confident_binary(self):
        assert certainty([0.99, 0.01]) == pytest.approx(0.9192, abs=1e-4)

    def test_uniform_is_zero(self):
        assert certainty([1 / 3, 1 / 3, 1 / 3]) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_is_one(self):
        assert certainty([0.0, 1.0, 0.0]) == 1.0

    def test_rows(self):
        values = certainty(np.array([[0.5, 0.5], [1.0, 0.0]]))
        np.testing.assert_allclose(values, [0.0, 1.0], atol=1e-12)

    def test_single_class(self):
        with pytest.raises(ValueError):
            certainty([1.0])

    def test_not_a_distribution(self):
        with pytest.raises(InvalidPosteriors):
            certainty([0.7, 0.7])


@pytest.mark.parametrize("kind", list(AggregatorKind), ids=lambda kind: kind.value)
class TestEveryPooler:
    def test_single_slice_returns_the_slice(self, kind):
        pooler = make_pooler(kind)
        h = np.array([[0.5, -1.0, 2.0, 0.0]])
        result = pooler.pool(h, posteriors=np.array([[0.2, 0.3, 0.5]]))
        np.testing.assert_array_equal(result.weights, [1.0])
        expected = h[0]
        if kind == AggregatorKind.CLASS_QUERY:
            expected = np.tile(h, (N_CLASSES, 1))
        np.testing.assert_allclose(result.z, expected, rtol=1e-12)

    def test_identical_slices_get_uniform_weights(self, kind):
        pooler = make_pooler(kind)
        h = np.tile([0.1, 0.2, -0.3, 0.4], (5, 1))
        posteriors = np.tile([0.2, 0.3, 0.5], (5, 1))
        result = pooler.pool(h, posteriors=posteriors)
        np.testing.assert_allclose(result.weights, np.full(5, 0.2), rtol=1e-12)

    def test_empty_bag(self, kind):
        with pytest.raises(EmptyBag):
            make_pooler(kind).pool(np.zeros((0, DIM)), posteriors=np.zeros((0, 3)))

    def test_wrong_dimension(self, kind):
        with pytest.raises(DimensionMismatch):
            make_pooler(kind).pool(
                np.zeros((2, DIM + 1)), posteriors=np.full((2, 3), 1 / 3)
            )

    def test_backward_before_forward(self, kind):
        with pytest.raises(BackwardBeforeForward):
            make_pooler(kind).pool_backward(np.zeros(DIM))

    def test_gradients(self, kind):
        rng = np.random.default_rng(11)
        pooler = make_pooler(kind, seed=3)
        h = rng.standard_normal((6, DIM))
        posteriors = random_posteriors(rng, 6)
        readout = rng.standard_normal(DIM)
        if kind == AggregatorKind.CLASS_QUERY:
            readout = rng.standard_normal((N_CLASSES, DIM))
        model = PoolerLoss(pooler, h, posteriors, readout)
        assert grad_check(model, batch=None, step=1e-5) < 1e-4


class TestUAAC:
    def test_certainty_weights_on_identical_slices(self):
        pooler = build_pooler(
            AggregatorSpec(kind=AggregatorKind.UAAC, hidden_dim=5),
            dim=DIM,
            n_classes=2,
        )
        h = np.tile([1.0, 0.0, -1.0, 0.5], (2, 1))
        result = pooler.pool(h, posteriors=np.array([[0.99, 0.01], [0.5, 0.5]]))
        np.testing.assert_allclose(result.weights, [0.9894, 0.0106], atol=1e-4)
        np.testing.assert_allclose(result.certainties, [0.9192, 0.0], atol=1e-4)

    def test_weights_increase_with_certainty(self):
        pooler = make_pooler(AggregatorKind.UAAC)
        h = np.tile([0.3, -0.2, 0.1, 0.0], (4, 1))
        posteriors = np.array(
            [
                [1 / 3, 1 / 3, 1 / 3],
                [0.5, 0.3, 0.2],
                [0.8, 0.1, 0.1],
                [0.98, 0.01, 0.01],
            ]
        )
        weights = pooler.pool(h, posteriors=posteriors).weights
        assert np.all(np.diff(weights) > 0)

    @pytest.mark.parametrize("gated", [False, True], ids=["tanh", "gated"])
    def test_reduces_to_attention_without_uncertainty(self, gated):
        rng = np.random.default_rng(4)
        h = rng.standard_normal((7, DIM))
        uaac = make_pooler(
            AggregatorKind.UAAC, seed=8, gated=gated, uncertainty_enabled=False
        )
        kind = AggregatorKind.GATED_ATTENTION if gated else AggregatorKind.ATTENTION
        attention = make_pooler(kind, seed=8)
        expected = attention.pool(h)
        actual = uaac.pool(h, posteriors=random_posteriors(rng, 7))
        np.testing.assert_allclose(actual.weights, expected.weights, atol=1e-12)
        np.testing.assert_allclose(actual.z, expected.z, atol=1e-12)

    def test_requires_posteriors(self):
        with pytest.raises(InvalidPosteriors):
            make_pooler(AggregatorKind.UAAC).pool(np.ones((2, DIM)))

    def test_posterior_class_count(self):
        with pytest.raises(DimensionMismatch):
            make_pooler(AggregatorKind.UAAC).pool(
                np.ones((2, DIM)), posteriors=np.full((2, 2), 0.5)
            )

    def test_rows_must_sum_to_one(self):
        with pytest.raises(InvalidPosteriors):
            make_pooler(AggregatorKind.UAAC).pool(
                np.ones((2, DIM)), posteriors=np.full((2, 3), 0.5)
            )


class TestInvariances:
    def test_permutation_invariance_and_normalisation(self):
        rng = np.random.default_rng(2024)
        kinds = list(AggregatorKind)
        poolers = {kind: make_pooler(kind, seed=1) for kind in kinds}
        for _ in range(1000):
            kind = kinds[rng.integers(len(kinds))]
            n = int(rng.integers(1, 65))
            h = rng.standard_normal((n, DIM))
            posteriors = random_posteriors(rng, n)
            perm = rng.permutation(n)

            original = poolers[kind].pool(h, posteriors=posteriors)
            permuted = poolers[kind].pool(h[perm], posteriors=posteriors[perm])

            assert np.all(original.weights >= 0)
            assert original.weights.sum() == pytest.approx(1.0, abs=1e-12)
            np.testing.assert_allclose(permuted.z, original.z, atol=1e-9)
            np.testing.assert_allclose(
                permuted.weights, original.weights[perm], atol=1e-12
            )


class TestBuildPooler:
    @pytest.mark.parametrize(
        "kind, cls",
        [
            (AggregatorKind.MEAN, MeanPooler),
            (AggregatorKind.MAX, MaxPooler),
            (AggregatorKind.ATTENTION, AttentionPooler),
            (AggregatorKind.GATED_ATTENTION, GatedAttentionPooler),
            (AggregatorKind.CLASS_QUERY, ClassQueryPooler),
            (AggregatorKind.UAAC, UAACPooler),
        ],
    )
    def test_kind_to_class(self, kind, cls):
        assert type(make_pooler(kind)) is cls

    def test_class_queries_shape(self):
        pooler = make_pooler(AggregatorKind.CLASS_QUERY)
        assert pooler.queries.shape == [N_CLASSES, DIM]

    def test_unknown_class_count(self):
        with pytest.raises(ValueError):
            build_pooler(AggregatorSpec(), dim=DIM)

    def test_conflicting_class_count(self):
        with pytest.raises(DimensionMismatch):
            build_pooler(AggregatorSpec(n_classes=2), dim=DIM, n_classes=3)

    def test_module_functions(self):
        pooler = make_pooler(AggregatorKind.MEAN)
        result = pool(pooler, np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0]]))
        np.testing.assert_allclose(result.z, [2.0, 2.0, 2.0, 2.0])
        np.testing.assert_allclose(
            pool_backward(pooler, np.ones(DIM)), np.full((2, DIM), 0.5)
        )
