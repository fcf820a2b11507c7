from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import torch

from .exceptions import CyclicGraph, DanglingRef, ShapeMismatch
from .kernels import LayerKernel, LayerKind, forward

INPUT_ID = "input"


@dataclass
class Layer:
    id: str
    kernel: LayerKernel
    inputs: list[str]
    weights: torch.Tensor = None
    bias: torch.Tensor = None

    @property
    def kind(self) -> LayerKind:
        return self.kernel.kind

    def copy(self) -> Layer:
        return replace(
            self,
            inputs=list(self.inputs),
            weights=None if self.weights is None else self.weights.detach().clone(),
            bias=None if self.bias is None else self.bias.detach().clone(),
        )


@dataclass
class Graph:
    """Float model: layers in topological order, fed by a single network input.

    `output_id` names the last layer. A trailing Softmax is allowed; `logits_id` then
    points at the pre-softmax layer.
    """
    layers: list[Layer]
    output_id: str = None
    input_id: str = INPUT_ID
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.output_id is None and self.layers:
            self.output_id = self.layers[-1].id
        self.validate()

    def validate(self):
        seen = {self.input_id}
        all_ids = {layer.id for layer in self.layers}
        for layer in self.layers:
            if layer.id in seen:
                raise CyclicGraph(f"Layer id {layer.id!r} defined twice")
            for ref in layer.inputs:
                if ref not in seen:
                    if ref in all_ids or ref == layer.id:
                        raise CyclicGraph(f"Layer {layer.id!r} references {ref!r} before it is defined")
                    raise DanglingRef(f"Layer {layer.id!r} references unknown layer {ref!r}")
            n_inputs = 2 if layer.kind == LayerKind.ADD else 1
            if len(layer.inputs) != n_inputs:
                raise ShapeMismatch(f"{layer.kind.value} layer {layer.id!r} needs {n_inputs} input(s), got {layer.inputs}")
            seen.add(layer.id)
        if self.output_id not in all_ids:
            raise DanglingRef(f"Output id {self.output_id!r} is not a layer")

    def __getitem__(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def __contains__(self, layer_id: str) -> bool:
        return any(layer.id == layer_id for layer in self.layers)

    def __iter__(self):
        return iter(self.layers)

    def consumers(self, layer_id: str) -> list[Layer]:
        return [layer for layer in self.layers if layer_id in layer.inputs]

    def producer(self, layer_id: str) -> Layer | None:
        return None if layer_id == self.input_id else self[layer_id]

    @property
    def logits_id(self) -> str:
        out = self[self.output_id]
        return out.inputs[0] if out.kind == LayerKind.SOFTMAX else out.id

    def layers_of_kind(self, *kinds: LayerKind) -> list[Layer]:
        return [layer for layer in self.layers if layer.kind in kinds]

    def copy(self) -> Graph:
        return Graph(
            [layer.copy() for layer in self.layers],
            output_id=self.output_id,
            input_id=self.input_id,
            metadata=dict(self.metadata),
        )

    def without(self, layer_id: str, rewire_to: str) -> Graph:
        "A copy with one layer removed and its consumers reading from `rewire_to`."
        layers = []
        for layer in self.layers:
            if layer.id == layer_id:
                continue
            layer = layer.copy()
            layer.inputs = [rewire_to if ref == layer_id else ref for ref in layer.inputs]
            layers.append(layer)
        output_id = rewire_to if self.output_id == layer_id else self.output_id
        return Graph(layers, output_id=output_id, input_id=self.input_id, metadata=dict(self.metadata))

    def run(
        self,
        x: torch.Tensor,
        upto: str = None,
        capture: bool = False,
        hook: Callable[[Layer, torch.Tensor], torch.Tensor] = None,
    ) -> torch.Tensor | dict[str, torch.Tensor]:
        """Float forward pass.

        upto: stop after this layer (defaults to the output layer).
        capture: return every intermediate value keyed by layer id (the input under `input_id`).
        hook: called on each layer's output; its return value replaces the output.
        """
        upto = upto or self.output_id
        values = {self.input_id: x}
        for layer in self.layers:
            args = [values[ref] for ref in layer.inputs]
            inp = tuple(args) if layer.kind == LayerKind.ADD else args[0]
            out = forward(layer.kernel, inp, layer.weights, layer.bias)
            if hook is not None:
                out = hook(layer, out)
            values[layer.id] = out
            if layer.id == upto:
                break
        return values if capture else values[upto]

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x, upto=self.logits_id)


def graphs_equal(a: Graph, b: Graph) -> bool:
    "Structural equality with bit-exact weights."
    if (a.output_id, a.input_id) != (b.output_id, b.input_id) or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.id, la.kernel, la.inputs) != (lb.id, lb.kernel, lb.inputs):
            return False
        for ta, tb in ((la.weights, lb.weights), (la.bias, lb.bias)):
            if (ta is None) != (tb is None):
                return False
            if ta is not None and not (ta.dtype == tb.dtype and torch.equal(ta, tb)):
                return False
    return True


def iter_batches(x: torch.Tensor, batch_size: int) -> Iterable[torch.Tensor]:
    for start in range(0, x.shape[0], batch_size):
        yield x[start:start + batch_size]
