"""Dense MLP kernel: flat parameter vectors, layered forward/backward, loss heads.

Everything is float64 and pure: functions never mutate their inputs, so the
same arrays can be handed to several workers at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError

DENSE = "dense"
RELU = "relu"
XENT_HEAD = "softmax-xent-head"
MSE_HEAD = "mse-head"

HEAD_KINDS = (XENT_HEAD, MSE_HEAD)
LAYER_KINDS = (DENSE, RELU) + HEAD_KINDS


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError(f"{self.kind} layer dims must be positive")
        if self.kind != DENSE and self.in_dim != self.out_dim:
            raise ConfigurationError(f"{self.kind} layer must keep its width")

    @property
    def param_count(self) -> int:
        if self.kind == DENSE:
            return self.in_dim * self.out_dim + self.out_dim
        return 0

    @property
    def is_head(self) -> bool:
        return self.kind in HEAD_KINDS


def mlp(in_dim: int, hidden: Sequence[int], classes: int, head: str = XENT_HEAD) -> list[LayerSpec]:
    """Dense/ReLU stack ending in a loss head."""
    layers = []
    width = in_dim
    for h in hidden:
        layers.append(LayerSpec(DENSE, width, h))
        layers.append(LayerSpec(RELU, h, h))
        width = h
    layers.append(LayerSpec(DENSE, width, classes))
    layers.append(LayerSpec(head, classes, classes))
    return layers


def validate_layers(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ConfigurationError("model has no layers")
    for i in range(1, len(layers)):
        if layers[i - 1].out_dim != layers[i].in_dim:
            raise ConfigurationError(
                f"layer {i} expects width {layers[i].in_dim}, previous layer gives {layers[i - 1].out_dim}"
            )
    heads = [i for i, layer in enumerate(layers) if layer.is_head]
    if heads != [len(layers) - 1]:
        raise ConfigurationError("exactly one loss head is required, as the last layer")


def _layers_of(model) -> Sequence[LayerSpec]:
    return model.layers if hasattr(model, "layers") else model


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 vector covering a contiguous run of model layers.

    ``layer_offsets[k]`` is where layer ``first_layer + k`` starts; the last
    entry is the total length. Parameter-free layers have zero-width slices.
    """

    values: np.ndarray
    layer_offsets: np.ndarray
    first_layer: int = 0

    def __post_init__(self):
        offsets = self.layer_offsets
        if offsets[0] != 0 or offsets[-1] != self.values.size or np.any(np.diff(offsets) < 0):
            raise ShapeError("layer offsets do not describe the value array")

    @classmethod
    def for_layers(cls, layers: Sequence[LayerSpec], values=None, first_layer: int = 0) -> ParamVector:
        offsets = np.concatenate([[0], np.cumsum([layer.param_count for layer in layers])]).astype(np.int64)
        if values is None:
            values = np.zeros(offsets[-1])
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offsets[-1],):
            raise ShapeError(f"expected {offsets[-1]} values, got shape {values.shape}")
        return cls(values, offsets, first_layer)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def n_layers(self) -> int:
        return len(self.layer_offsets) - 1

    @property
    def last_layer(self) -> int:
        return self.first_layer + self.n_layers

    def layer(self, index: int) -> np.ndarray:
        k = index - self.first_layer
        if not 0 <= k < self.n_layers:
            raise UsageError(f"layer {index} not covered by this vector")
        return self.values[self.layer_offsets[k] : self.layer_offsets[k + 1]]

    def same_shape(self, other: ParamVector) -> bool:
        return (
            self.first_layer == other.first_layer
            and self.layer_offsets.shape == other.layer_offsets.shape
            and np.array_equal(self.layer_offsets, other.layer_offsets)
        )

    def check_shape(self, other: ParamVector) -> None:
        if not self.same_shape(other):
            raise ShapeError(
                f"parameter vectors differ: layers [{self.first_layer},{self.last_layer}) size {self.size} "
                f"vs [{other.first_layer},{other.last_layer}) size {other.size}"
            )

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layer_offsets, self.first_layer)

    def zeros_like(self) -> ParamVector:
        return self.with_values(np.zeros_like(self.values))

    def copy(self) -> ParamVector:
        return self.with_values(self.values.copy())

    def __add__(self, other: ParamVector) -> ParamVector:
        self.check_shape(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self.check_shape(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> ParamVector:
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> ParamVector:
        return self.with_values(-self.values)

    def equals(self, other: ParamVector) -> bool:
        """Bitwise equality of shape and values."""
        return self.same_shape(other) and np.array_equal(self.values, other.values)

    def slice_layers(self, start: int, stop: int) -> ParamVector:
        a, b = start - self.first_layer, stop - self.first_layer
        if not 0 <= a <= b <= self.n_layers:
            raise UsageError(f"layers [{start},{stop}) outside [{self.first_layer},{self.last_layer})")
        offsets = self.layer_offsets[a : b + 1] - self.layer_offsets[a]
        values = self.values[self.layer_offsets[a] : self.layer_offsets[b]].copy()
        return ParamVector(values, offsets, start)

    def concat(self, other: ParamVector) -> ParamVector:
        if other.first_layer != self.last_layer:
            raise ShapeError(f"cannot append layers starting at {other.first_layer} after {self.last_layer}")
        offsets = np.concatenate([self.layer_offsets, other.layer_offsets[1:] + self.size])
        return ParamVector(np.concatenate([self.values, other.values]), offsets, self.first_layer)


def linear_combination(coeffs: Sequence[float], vectors: Sequence[ParamVector]) -> ParamVector:
    """sum_k coeffs[k] * vectors[k], accumulated left to right."""
    if len(coeffs) != len(vectors) or not vectors:
        raise UsageError("need one coefficient per vector and at least one vector")
    first = vectors[0]
    acc = first.values * float(coeffs[0])
    for c, v in zip(coeffs[1:], vectors[1:]):
        first.check_shape(v)
        acc = acc + v.values * float(c)
    return first.with_values(acc)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise UsageError("batch inputs must be a non-empty matrix")
        if len(self.labels) != self.inputs.shape[0]:
            raise UsageError("one label per input row is required")

    def __len__(self):
        return self.inputs.shape[0]


def init_params(model, seed: int) -> ParamVector:
    """Glorot-uniform dense weights, zero biases."""
    layers = _layers_of(model)
    validate_layers(layers)
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in layers:
        if layer.kind == DENSE:
            limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            w = rng.uniform(-limit, limit, size=(layer.in_dim, layer.out_dim))
            chunks.append(w.ravel())
            chunks.append(np.zeros(layer.out_dim))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector.for_layers(layers, values)


def _dense_weights(layer: LayerSpec, flat: np.ndarray):
    n = layer.in_dim * layer.out_dim
    return flat[:n].reshape(layer.in_dim, layer.out_dim), flat[n:]


@dataclass
class Cache:
    """Saved inputs of every layer run by :func:`forward`."""

    layers: Sequence[LayerSpec] = ()
    params: ParamVector | None = None
    from_layer: int = 0
    to_layer: int = 0
    inputs: list = field(default_factory=list)
    output: np.ndarray | None = None

    @property
    def ready(self) -> bool:
        return self.params is not None


def forward(model, params: ParamVector, inputs: np.ndarray, from_layer: int = 0, to_layer: int | None = None):
    """Run layers ``[from_layer, to_layer)`` and return ``(activations, cache)``.

    ``params`` may be the full vector or any slice covering that range. Loss
    heads are the identity in the forward direction, so running through the
    head returns logits (or regression outputs).
    """
    layers = _layers_of(model)
    if to_layer is None:
        to_layer = len(layers)
    if not 0 <= from_layer <= to_layer <= len(layers):
        raise ConfigurationError(f"layer range [{from_layer},{to_layer}) invalid for {len(layers)} layers")
    if from_layer < params.first_layer or to_layer > params.last_layer:
        raise ShapeError(
            f"parameters cover layers [{params.first_layer},{params.last_layer}), need [{from_layer},{to_layer})"
        )
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError("inputs must be a 2-D matrix")
    expected = layers[from_layer].in_dim if from_layer < len(layers) else layers[-1].out_dim
    if x.shape[1] != expected:
        raise ConfigurationError(f"input width {x.shape[1]} does not match layer {from_layer} ({expected})")

    cache = Cache(layers, params, from_layer, to_layer)
    for i in range(from_layer, to_layer):
        layer = layers[i]
        cache.inputs.append(x)
        if layer.kind == DENSE:
            w, b = _dense_weights(layer, params.layer(i))
            x = x @ w + b
        elif layer.kind == RELU:
            x = np.maximum(x, 0.0)
    cache.output = x
    return x, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _regression_targets(outputs: np.ndarray, targets) -> np.ndarray:
    """Targets shaped like ``outputs``; 1-D integer labels become one-hot rows."""
    t = np.asarray(targets)
    if t.ndim == 1 and outputs.shape[1] > 1 and np.issubdtype(t.dtype, np.integer):
        return np.eye(outputs.shape[1])[t]
    try:
        return t.astype(np.float64).reshape(outputs.shape)
    except ValueError as exc:
        raise ShapeError(f"targets of shape {t.shape} do not fit outputs {outputs.shape}") from exc


def head_loss(head: LayerSpec, outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean loss over the batch for the given head."""
    if head.kind == XENT_HEAD:
        labels = np.asarray(targets, dtype=np.int64)
        z = outputs - outputs.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        return float(np.mean(log_norm - z[np.arange(len(labels)), labels]))
    if head.kind == MSE_HEAD:
        diff = outputs - _regression_targets(outputs, targets)
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))
    raise UsageError(f"{head.kind} is not a loss head")


def head_grad(head: LayerSpec, outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(outputs); the 1/B factor is applied here."""
    n = outputs.shape[0]
    if head.kind == XENT_HEAD:
        labels = np.asarray(targets, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= outputs.shape[1]:
            raise UsageError("label outside class range")
        g = softmax(outputs)
        g[np.arange(n), labels] -= 1.0
        return g / n
    if head.kind == MSE_HEAD:
        return (outputs - _regression_targets(outputs, targets)) / n
    raise UsageError(f"{head.kind} is not a loss head")


def backward(cache: Cache | None, upstream: np.ndarray | None = None, *, labels=None, input_grad: bool = True):
    """Back-propagate through the layers recorded in ``cache``.

    If the cached range ends with the loss head, pass ``labels`` (class ids or
    regression targets); otherwise pass ``upstream``, the gradient w.r.t. the
    cached output. Returns ``(param_grads, grad_wrt_input)``; the second item
    is ``None`` when ``input_grad`` is false.
    """
    if cache is None or not cache.ready:
        raise UsageError("backward called without a matching forward")
    layers = cache.layers
    grads = ParamVector.for_layers(layers[cache.from_layer : cache.to_layer], first_layer=cache.from_layer)
    ends_with_head = cache.to_layer > cache.from_layer and layers[cache.to_layer - 1].is_head

    if ends_with_head:
        if labels is None:
            raise UsageError("labels are required when the cached range ends with the loss head")
        head = layers[cache.to_layer - 1]
        g = head_grad(head, cache.output, labels)
        stop = cache.to_layer - 1
    else:
        if upstream is None:
            raise UsageError("upstream gradient is required")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != cache.output.shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.output.shape}")
        stop = cache.to_layer

    for i in range(stop - 1, cache.from_layer - 1, -1):
        layer = layers[i]
        x = cache.inputs[i - cache.from_layer]
        if layer.kind == DENSE:
            w, _ = _dense_weights(layer, cache.params.layer(i))
            out = grads.layer(i)
            n = layer.in_dim * layer.out_dim
            out[:n] = (x.T @ g).ravel()
            out[n:] = g.sum(axis=0)
            if i > cache.from_layer or input_grad:
                g = g @ w.T
        elif layer.kind == RELU:
            g = g * (x > 0.0)
    return grads, (g if input_grad else None)


def loss_and_grads(model, params: ParamVector, inputs: np.ndarray, targets):
    """Full-model mean loss and parameter gradient."""
    outputs, cache = forward(model, params, inputs)
    layers = _layers_of(model)
    loss = head_loss(layers[-1], outputs, targets)
    grads, _ = backward(cache, labels=targets, input_grad=False)
    return loss, grads


def predict(model, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    outputs, _ = forward(model, params, inputs)
    return np.argmax(outputs, axis=1)


def evaluate(model, params: ParamVector, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(labels) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, params, inputs) == np.asarray(labels)))
