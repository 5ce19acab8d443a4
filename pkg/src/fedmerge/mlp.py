"""A small multilayer perceptron over flat parameter vectors.

The network is fully described by a `ModelSpec`; its parameters live in a
single flat float64 vector (layer by layer, weight matrix then bias), which
is the currency the federation rounds trade in. Loss is mean softmax
cross-entropy over the batch, so duplicating rows or permuting the batch
leaves loss and gradient unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyTestSet, NonFiniteLoss
from .vectors import ParamVector

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the classifier: layer widths and activation."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        widths = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class Batch:
    """A batch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DimensionMismatch(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionMismatch("labels must be 1-D and match the batch size")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def param_count(spec: ModelSpec) -> int:
    """Total parameter count: sum over layers of fan_in*fan_out + fan_out."""
    return sum(fi * fo + fo for fi, fo in spec.layer_dims)


def init_params(spec: ModelSpec, seed) -> ParamVector:
    """Deterministic Glorot-uniform weights with zero biases.

    Weights are drawn uniformly from +-sqrt(6/(fan_in+fan_out)) layer by
    layer; the same (spec, seed) always yields a bit-identical vector.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def unpack_params(spec: ModelSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into (W, b) views per layer."""
    params = np.asarray(params, dtype=np.float64)
    expected = param_count(spec)
    if params.ndim != 1 or params.shape[0] != expected:
        raise DimensionMismatch(
            f"expected {expected} parameters for this spec, got shape {params.shape}"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward(spec: ModelSpec, layers, inputs: np.ndarray):
    """Forward pass; returns logits plus per-layer activations and pre-activations."""
    acts = [inputs]
    pre = []
    a = inputs
    for w, b in layers[:-1]:
        z = a @ w + b
        pre.append(z)
        a = _activate(z, spec.activation)
        acts.append(a)
    w, b = layers[-1]
    logits = a @ w + b
    return logits, acts, pre


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient.

    The gradient is with respect to the flat parameter vector and is the
    gradient of the mean (not sum), so it is invariant to duplicating
    batch rows.
    """
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    if batch.inputs.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f"batch input dim {batch.inputs.shape[1]} != spec input dim {spec.input_dim}"
        )
    layers = unpack_params(spec, params)
    n = len(batch)
    logits, acts, pre = _forward(spec, layers, batch.inputs)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), batch.labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    # d(mean CE)/d logits = (softmax - onehot) / n
    dlogits = np.exp(logp)
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n

    grads: list[np.ndarray | None] = [None] * len(layers)
    delta = dlogits
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        dw = acts[li].T @ delta
        db = delta.sum(axis=0)
        grads[li] = np.concatenate([dw.ravel(), db])
        if li > 0:
            da = delta @ w.T
            z = pre[li - 1]
            if spec.activation == "relu":
                delta = da * (z > 0.0)
            else:
                delta = da * (1.0 - np.tanh(z) ** 2)
    grad = np.concatenate(grads)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("gradient contains non-finite entries")
    return loss, grad


def predict(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties break toward the lowest class index."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"inputs shape {inputs.shape} incompatible with spec")
    layers = unpack_params(spec, params)
    logits, _, _ = _forward(spec, layers, inputs)
    return np.argmax(logits, axis=1)


def evaluate(spec: ModelSpec, params: ParamVector, test_set: Batch) -> tuple[float, float]:
    """(accuracy, mean cross-entropy loss) over a nonempty test set."""
    if len(test_set) == 0:
        raise EmptyTestSet("evaluation needs at least one sample")
    layers = unpack_params(spec, params)
    logits, _, _ = _forward(spec, layers, test_set.inputs)
    logp = _log_softmax(logits)
    n = len(test_set)
    loss = float(-logp[np.arange(n), test_set.labels].mean())
    preds = np.argmax(logits, axis=1)
    accuracy = float(np.mean(preds == test_set.labels))
    return accuracy, loss
