"""Cutting a layered model into client- and server-side parts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigurationError, ShapeError
from .tensor import DENSE, LayerSpec, ParamVector, validate_layers

BYTES_PER_VALUE = 8


def layer_macs(layer: LayerSpec) -> int:
    return layer.in_dim * layer.out_dim if layer.kind == DENSE else 0


def kb_for(width: int) -> float:
    return width * BYTES_PER_VALUE / 1024


@dataclass(frozen=True)
class SplitModel:
    """Layer list plus the cut index.

    Layers ``[0, cut_index)`` run on the client, the rest on the server.
    ``per_layer_macs`` and ``per_layer_activation_kb`` default to the analytic
    profile (dense = in*out MACs, float64 activations) but can be overridden
    with measured numbers.
    """

    layers: tuple[LayerSpec, ...]
    cut_index: int
    per_layer_macs: tuple[int, ...] = field(default=None)
    per_layer_activation_kb: tuple[float, ...] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_layers(self.layers)
        if not 0 <= self.cut_index < len(self.layers):
            raise ConfigurationError(
                f"cut index {self.cut_index} outside [0, {len(self.layers)})", "model.cut"
            )
        if self.per_layer_macs is None:
            object.__setattr__(self, "per_layer_macs", tuple(layer_macs(l) for l in self.layers))
        if self.per_layer_activation_kb is None:
            object.__setattr__(self, "per_layer_activation_kb", tuple(kb_for(l.out_dim) for l in self.layers))
        for name in ("per_layer_macs", "per_layer_activation_kb"):
            values = getattr(self, name)
            if len(values) != len(self.layers) or any(v < 0 for v in values):
                raise ConfigurationError("need one nonnegative entry per layer", f"model.{name}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    def with_cut(self, cut_index: int) -> SplitModel:
        return SplitModel(self.layers, cut_index, self.per_layer_macs, self.per_layer_activation_kb)


@dataclass(frozen=True)
class SubmodelPair:
    client: ParamVector
    server: ParamVector


def split(full: ParamVector, model: SplitModel) -> SubmodelPair:
    """Cut a full parameter vector at the model's cut layer (lossless)."""
    if full.first_layer != 0 or full.n_layers != model.n_layers or full.size != model.param_count:
        raise ShapeError(f"vector of size {full.size} does not match model with {model.param_count} parameters")
    L = model.cut_index
    return SubmodelPair(full.slice_layers(0, L), full.slice_layers(L, model.n_layers))


def join(pair: SubmodelPair, model: SplitModel) -> ParamVector:
    """Inverse of :func:`split`."""
    L = model.cut_index
    c, s = pair.client, pair.server
    if c.first_layer != 0 or c.last_layer != L or s.first_layer != L or s.last_layer != model.n_layers:
        raise ShapeError(
            f"submodels cover [{c.first_layer},{c.last_layer}) + [{s.first_layer},{s.last_layer}), "
            f"model cut is {L} of {model.n_layers}"
        )
    full = c.concat(s)
    if full.size != model.param_count:
        raise ShapeError("joined size does not match the model")
    return full


def compute_ratio(model: SplitModel) -> float:
    """Fraction of the model's MACs executed client-side."""
    total = sum(model.per_layer_macs)
    if total == 0:
        raise ConfigurationError("model has zero MACs", "model")
    return sum(model.per_layer_macs[: model.cut_index]) / total


def activation_size(model: SplitModel) -> float:
    """Per-sample size in kb of what crosses the cut.

    With ``cut_index == 0`` the raw input vector is sent.
    """
    if model.cut_index == 0:
        return kb_for(model.in_dim)
    return model.per_layer_activation_kb[model.cut_index - 1]


def model_kb(model: SplitModel) -> float:
    return kb_for(model.param_count)


def describe(layers: Sequence[LayerSpec]) -> str:
    return " -> ".join(f"{l.kind}({l.in_dim}x{l.out_dim})" if l.kind == DENSE else l.kind for l in layers)
