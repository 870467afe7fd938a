"""A minimal deterministic differentiable compute kernel.

Every layer caches what it needs in `forward` and accumulates exact reverse-mode
gradients into its `ParamTensor`s in `backward`. All arithmetic is float64.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from scipy.special import expit, xlogy

from .config import MlpSpec
from .datamodel import read_tensor, write_tensor
from .enums import Activation, OutputActivation
from .exceptions import (
    BackwardBeforeForward,
    CheckpointMismatch,
    DimensionMismatch,
    NonFiniteTensor,
    TensorFormatError,
    TrainingDiverged,
    TruncatedTensor,
)
from .utils import sha256_file, write_json

logger = logging.getLogger(__name__)


PROBABILITY_CLAMP = 1e-12


class ParamTensor:
    """A trainable tensor together with its gradient.

    Args:
        name:
            The name of the parameter, unique within a model.
        values:
            The initial values.

    Attributes:
        name:
            The name of the parameter.
        values:
            The current values, a float64 array.
        grad:
            The accumulated gradient, with the same shape as `values`.
        frozen:
            Whether optimisers skip this parameter.
    """

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.frozen = False

    @property
    def shape(self) -> list[int]:
        return list(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor(name={self.name!r}, shape={self.shape})"


def glorot_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]
) -> np.ndarray:
    """Uniform initialisation on (-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module(ABC):
    """A differentiable layer."""

    name: str = "module"

    def parameters(self) -> list[ParamTensor]:
        return list()

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        ...

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


class Dense(Module):
    """Affine layer y = x W + b, applied row-wise.

    Args:
        in_dim:
            Input width.
        out_dim:
            Output width.
        rng:
            Generator for the weight initialisation.
        name:
            Prefix of the parameter names.
    """

    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "dense"
    ):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = ParamTensor(
            f"{name}.weight", glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim))
        )
        self.bias = ParamTensor(f"{name}.bias", np.zeros(out_dim))
        self._x: np.ndarray | None = None

    def parameters(self) -> list[ParamTensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(
                expected=self.in_dim, actual=x.shape[-1], what=f"{self.name} input"
            )
        self._x = x
        return x @ self.weight.values + self.bias.values

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise BackwardBeforeForward(self.name)
        x, self._x = self._x, None
        x2d = x.reshape(-1, self.in_dim)
        grad2d = grad_out.reshape(-1, self.out_dim)
        self.weight.grad += x2d.T @ grad2d
        self.bias.grad += grad2d.sum(axis=0)
        return grad_out @ self.weight.values.T


class ClassWiseDense(Module):
    """One linear readout per class: y_k = <W_k, z_k> + b_k, for z of shape (K, d).

    Args:
        n_classes:
            Number of classes K.
        dim:
            Width d of each class embedding.
        rng:
            Generator for the weight initialisation.
        name:
            Prefix of the parameter names.
    """

    def __init__(
        self,
        n_classes: int,
        dim: int,
        rng: np.random.Generator,
        name: str = "classwise",
    ):
        self.name = name
        self.weight = ParamTensor(
            f"{name}.weight", glorot_uniform(rng, dim, 1, (n_classes, dim))
        )
        self.bias = ParamTensor(f"{name}.bias", np.zeros(n_classes))
        self._z: np.ndarray | None = None

    def parameters(self) -> list[ParamTensor]:
        return [self.weight, self.bias]

    def forward(self, z: np.ndarray) -> np.ndarray:
        if z.shape != self.weight.values.shape:
            raise DimensionMismatch(
                expected=tuple(self.weight.shape), actual=z.shape, what=self.name
            )
        self._z = z
        return np.sum(z * self.weight.values, axis=1) + self.bias.values

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._z is None:
            raise BackwardBeforeForward(self.name)
        z, self._z = self._z, None
        self.weight.grad += grad_out[:, None] * z
        self.bias.grad += grad_out
        return grad_out[:, None] * self.weight.values


class ReLU(Module):
    name = "relu"

    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise BackwardBeforeForward(self.name)
        mask, self._mask = self._mask, None
        return np.where(mask, grad_out, 0.0)


class Tanh(Module):
    name = "tanh"

    def __init__(self):
        self._out: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = np.tanh(x)
        return self._out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise BackwardBeforeForward(self.name)
        out, self._out = self._out, None
        return grad_out * (1.0 - out**2)


class Sigmoid(Module):
    name = "sigmoid"

    def __init__(self):
        self._out: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = expit(x)
        return self._out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise BackwardBeforeForward(self.name)
        out, self._out = self._out, None
        return grad_out * out * (1.0 - out)


class Softmax(Module):
    """Softmax over the last axis."""

    name = "softmax"

    def __init__(self):
        self._out: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = softmax(x)
        return self._out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise BackwardBeforeForward(self.name)
        out, self._out = self._out, None
        return softmax_backward(out, grad_out)


def build_activation(activation: Activation | OutputActivation) -> Module | None:
    """Instantiate the module of an activation, or None for the identity."""
    match activation:
        case Activation.RELU:
            return ReLU()
        case Activation.TANH:
            return Tanh()
        case OutputActivation.SIGMOID:
            return Sigmoid()
        case OutputActivation.SOFTMAX:
            return Softmax()
        case _:
            return None


class Mlp(Module):
    """A multilayer perceptron built from an `MlpSpec`.

    Args:
        spec:
            The topology.
        name:
            Prefix of the parameter names.

    Attributes:
        spec:
            The topology.
        layers:
            The affine layers.
        activations:
            The hidden activations, one fewer than the layers.
        output_activation:
            The output activation, or None.
    """

    def __init__(self, spec: MlpSpec, name: str = "mlp"):
        self.spec = spec
        self.name = name
        rng = np.random.default_rng(spec.seed)
        self.layers = [
            Dense(in_dim, out_dim, rng=rng, name=f"{name}.{idx}")
            for idx, (in_dim, out_dim) in enumerate(
                zip(spec.widths[:-1], spec.widths[1:])
            )
        ]
        self.activations = [
            build_activation(spec.activation) for _ in range(len(self.layers) - 1)
        ]
        self.output_activation = build_activation(spec.output_activation)

    @property
    def in_dim(self) -> int:
        return self.spec.widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]

    def parameters(self) -> list[ParamTensor]:
        return [param for layer in self.layers for param in layer.parameters()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for idx, layer in enumerate(self.layers):
            h = layer.forward(h)
            if idx < len(self.activations):
                h = self.activations[idx].forward(h)
        if self.output_activation is not None:
            h = self.output_activation.forward(h)
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad = grad_out
        if self.output_activation is not None:
            grad = self.output_activation.backward(grad)
        for idx in reversed(range(len(self.layers))):
            if idx < len(self.activations):
                grad = self.activations[idx].backward(grad)
            grad = self.layers[idx].backward(grad)
        return grad

    def copy_from(self, other: "Mlp") -> None:
        """Copy the parameter values of an MLP with the same topology."""
        for mine, theirs in zip(self.parameters(), other.parameters(), strict=True):
            if mine.shape != theirs.shape:
                raise DimensionMismatch(
                    expected=tuple(mine.shape),
                    actual=tuple(theirs.shape),
                    what=mine.name,
                )
            mine.values = theirs.values.copy()


def build_mlp(spec: MlpSpec, name: str = "mlp") -> Mlp:
    """Build an MLP from its topology."""
    return Mlp(spec=spec, name=name)


def mlp_forward(model: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run an MLP and return its output together with every layer input.

    Args:
        model:
            The MLP.
        x:
            The input, of shape (in_dim,) or (n, in_dim).

    Returns:
        A pair (output, activations), where `activations` holds the input of every
        affine layer followed by the final output.

    Raises:
        DimensionMismatch:
            If the input width does not match the first layer.
    """
    activations = [np.asarray(x, dtype=np.float64)]
    output = model.forward(x)
    for layer in model.layers[1:]:
        assert layer._x is not None
        activations.append(layer._x)
    activations.append(output)
    return output, activations


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax.

    Args:
        z:
            Finite scores.
        axis:
            The axis to normalise over.

    Returns:
        Positive probabilities summing to 1 along `axis`.
    """
    z = np.asarray(z, dtype=np.float64)
    shifted = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the softmax over the last axis."""
    return p * (grad_out - np.sum(grad_out * p, axis=-1, keepdims=True))


def cross_entropy(p: np.ndarray, y: int) -> float:
    """Negative log-likelihood of class `y` under the probability vector `p`.

    Args:
        p:
            A probability vector.
        y:
            The true class index.

    Returns:
        -log p[y], with p clamped to [1e-12, 1].

    Raises:
        IndexError:
            If `y` is out of range.
    """
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.shape[-1]:
        raise IndexError(f"Class index {y} is out of range for {p.shape[-1]} classes.")
    return float(-np.log(np.clip(p[y], PROBABILITY_CLAMP, 1.0)))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray | int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fused softmax and cross-entropy.

    Args:
        logits:
            Scores of shape (K,) or (n, K).
        labels:
            True class index, or one per row.

    Returns:
        A triple (losses, probabilities, grad_logits) where `grad_logits` is the
        gradient of each row's loss with respect to its logits, i.e. p - onehot(y).
    """
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax(logits)
    labels_arr = np.asarray(labels)
    onehot = np.zeros_like(probs)
    np.put_along_axis(
        onehot, labels_arr.reshape(labels_arr.shape + (1,)), 1.0, axis=-1
    )
    picked = np.take_along_axis(
        probs, labels_arr.reshape(labels_arr.shape + (1,)), axis=-1
    )[..., 0]
    losses = -np.log(np.clip(picked, PROBABILITY_CLAMP, 1.0))
    return losses, probs, probs - onehot


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with 0 log 0 = 0."""
    return -np.sum(xlogy(p, p), axis=-1)


def entropy_backward(p: np.ndarray, grad_out: np.ndarray | float) -> np.ndarray:
    """Gradient of the entropy with respect to the probabilities.

    Args:
        p:
            Probabilities, clamped to at least 1e-12 inside the logarithm.
        grad_out:
            Upstream gradient of the entropy.

    Returns:
        -(log p + 1) times the upstream gradient.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return -(np.log(np.clip(p, PROBABILITY_CLAMP, None)) + 1.0) * grad_out[..., None]


def weighted_sum(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """z = sum_i w_i h_i, for weights of shape (n,) and rows of shape (n, d)."""
    return w @ h


def weighted_sum_backward(
    w: np.ndarray, h: np.ndarray, grad_z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of `weighted_sum` with respect to the weights and the rows."""
    return h @ grad_z, np.outer(w, grad_z)


def adam_step(
    params: list[ParamTensor],
    state: dict[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Args:
        params:
            The parameters, with populated gradients. Frozen parameters are skipped.
        state:
            The first and second moment estimates per parameter name. Updated in
            place.
        lr:
            The learning rate.
        t:
            The 1-based step number.
        beta1:
            Decay of the first moment.
        beta2:
            Decay of the second moment.
        eps:
            Denominator offset.

    Raises:
        TrainingDiverged:
            If a gradient is not finite.
        ValueError:
            If `t` is smaller than 1.
    """
    if t < 1:
        raise ValueError(f"The Adam step number must be at least 1, got {t}.")
    for param in params:
        if param.frozen:
            continue
        if not np.all(np.isfinite(param.grad)):
            raise TrainingDiverged(parameter=param.name)
        m, v = state.get(
            param.name, (np.zeros_like(param.values), np.zeros_like(param.values))
        )
        m = beta1 * m + (1 - beta1) * param.grad
        v = beta2 * v + (1 - beta2) * param.grad**2
        state[param.name] = (m, v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        param.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam optimiser keeping moment estimates per parameter.

    Args:
        params:
            The parameters to optimise.
        lr:
            The learning rate.
        beta1:
            Decay of the first moment.
        beta2:
            Decay of the second moment.
        eps:
            Denominator offset.
    """

    def __init__(
        self,
        params: list[ParamTensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = dict()

    def step(self) -> None:
        self.t += 1
        adam_step(
            self.params,
            state=self.state,
            lr=self.lr,
            t=self.t,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()


class Differentiable(Protocol):
    """A model exposing a scalar loss and its gradients."""

    def parameters(self) -> list[ParamTensor]:
        ...

    def forward_loss(self, batch: Any) -> float:
        ...

    def backward(self) -> None:
        ...


def grad_check(model: Differentiable, batch: Any, step: float = 1e-4) -> float:
    """Compare analytic gradients against central finite differences.

    The numerical derivative uses the fourth-order central stencil
    (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h over every parameter entry. Its
    truncation error is O(h^4) and vanishes on polynomials of degree at most four.
    With the default step and float64 losses, correct gradients of smooth models give
    errors well below 1e-5. A bound of 1e-4 still passes ReLU models whose
    pre-activations lie near zero, while a wrong gradient gives errors above 1e-2.

    Args:
        model:
            The model to check.
        batch:
            The input passed to `model.forward_loss`.
        step:
            The finite difference step h.

    Returns:
        The maximum relative error |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
    """
    params = model.parameters()
    for param in params:
        param.zero_grad()
    model.forward_loss(batch)
    model.backward()
    analytic = [param.grad.copy() for param in params]

    max_error = 0.0
    for param, grad in zip(params, analytic):
        flat_values = param.values.reshape(-1)
        flat_grad = grad.reshape(-1)
        for idx in range(flat_values.size):
            original = flat_values[idx]
            losses = list()
            for multiple in (2, 1, -1, -2):
                flat_values[idx] = original + multiple * step
                losses.append(model.forward_loss(batch))
            flat_values[idx] = original
            numeric = (-losses[0] + 8 * losses[1] - 8 * losses[2] + losses[3]) / (
                12 * step
            )
            error = abs(flat_grad[idx] - numeric) / max(
                abs(flat_grad[idx]), abs(numeric), 1e-8
            )
            max_error = max(max_error, error)

    for param, grad in zip(params, analytic):
        param.grad[...] = grad
    logger.debug(f"Gradient check over {len(params)} tensors: {max_error:.3e}.")
    return max_error


def save_parameters(
    params: list[ParamTensor], path: str | Path, topology: dict[str, Any]
) -> str:
    """Save parameters as one flat tensor file with a JSON topology sidecar.

    Args:
        params:
            The parameters, in topology order.
        path:
            Path of the tensor file. The sidecar gets the same name with a `.json`
            suffix.
        topology:
            Extra topology information stored in the sidecar.

    Returns:
        The SHA-256 checksum of the tensor file.
    """
    path = Path(path)
    if len(params) > 0:
        flat = np.concatenate([param.values.ravel() for param in params])
    else:
        flat = np.zeros(0)
    write_tensor(path, [flat.size], flat)
    checksum = sha256_file(path)
    sidecar = dict(
        topology,
        parameters=[dict(name=param.name, shape=param.shape) for param in params],
        checksum=checksum,
    )
    write_json(path.with_suffix(".json"), sidecar)
    return checksum


def read_topology(path: str | Path) -> dict[str, Any]:
    """Read the JSON topology sidecar of a checkpoint.

    Raises:
        CheckpointMismatch:
            If the checkpoint or its sidecar is missing or unreadable.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    for required in [path, sidecar_path]:
        if not required.exists():
            raise CheckpointMismatch(path=required, reason="the file does not exist")
    try:
        with sidecar_path.open(encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointMismatch(path=sidecar_path, reason=f"invalid JSON: {e}")


def load_parameters(params: list[ParamTensor], path: str | Path) -> str:
    """Load parameter values saved by `save_parameters`.

    Args:
        params:
            The parameters of a freshly built model with the saved topology.
        path:
            Path of the tensor file.

    Returns:
        The SHA-256 checksum of the tensor file.

    Raises:
        CheckpointMismatch:
            If the names, shapes or total size do not match.
    """
    path = Path(path)
    topology = read_topology(path)
    saved = [(entry["name"], list(entry["shape"])) for entry in topology["parameters"]]
    expected = [(param.name, param.shape) for param in params]
    if saved != expected:
        raise CheckpointMismatch(
            path=path, reason="the parameter names or shapes differ from the model"
        )
    try:
        shape, values = read_tensor(path)
    except (TensorFormatError, TruncatedTensor, NonFiniteTensor) as e:
        raise CheckpointMismatch(path=path, reason=e.message)
    total = sum(param.size for param in params)
    if shape != [total]:
        raise CheckpointMismatch(
            path=path, reason=f"expected {total} values, found shape {shape}"
        )

    offset = 0
    for param in params:
        param.values = (
            values[offset : offset + param.size].astype(np.float64).reshape(param.shape)
        )
        param.grad = np.zeros_like(param.values)
        offset += param.size
    return sha256_file(path)
