"""Fake-quant student network: the frozen float graph with quantize/dequantize at every site."""
from __future__ import annotations

from typing import Iterator

import torch
from torch import nn

from core.exceptions import MissingSiteParams
from core.graph import Graph, Layer
from core.kernels import LayerKind, WEIGHTED_KINDS, forward
from .calibration import activation_sites, weight_site
from .quantizer import (
    QuantParams,
    fake_quant_forward,
    quantize_bias,
    quantize_tensor,
    scale_and_zero_point,
    ste_backward,
)

SCALE_RANGE = (0.75, 1.25)


def _key(name: str) -> str:
    # ParameterDict keys may not contain "."
    return name.replace(".", "__")


class FakeQuantize(torch.autograd.Function):
    """dequantize(quantize(x)) with straight-through gradients to x and the site's trainable scales.

    With `surrogate` the forward is the round-free clip, whose exact derivative is the STE backward.
    """

    @staticmethod
    def forward(ctx, x, alpha, alpha_t, alpha_r, params: QuantParams, surrogate: bool = False):
        ctx.save_for_backward(x, alpha, alpha_t, alpha_r)
        ctx.params = params
        return fake_quant_forward(x, params.with_trainables(alpha, alpha_t, alpha_r), surrogate=surrogate)

    @staticmethod
    def backward(ctx, grad_out):
        x, alpha, alpha_t, alpha_r = ctx.saved_tensors
        p = ctx.params.with_trainables(alpha, alpha_t, alpha_r)
        grad_x, grad_alpha, grad_alpha_t, grad_alpha_r = ste_backward(grad_out, x, p)
        return grad_x, grad_alpha, grad_alpha_t, grad_alpha_r, None, None


class PointwiseScales(nn.Module):
    """Trainable per-element factors for every weight tensor and bias, evaluated clipped to [0.75, 1.25]."""

    def __init__(self, tensors: dict[str, dict[str, torch.Tensor]]):
        super().__init__()
        self.layer_ids = list(tensors)
        self.factors = nn.ParameterDict()
        for layer_id, entry in tensors.items():
            for name, t in entry.items():
                self.factors[_key(f"{layer_id}.{name}")] = nn.Parameter(t.detach().to(torch.float64).clone())

    @classmethod
    def for_graph(cls, graph: Graph) -> PointwiseScales:
        tensors = {}
        for layer in graph.layers_of_kind(*WEIGHTED_KINDS):
            tensors[layer.id] = {"weights": torch.ones_like(layer.weights)}
            if layer.bias is not None:
                tensors[layer.id]["bias"] = torch.ones_like(layer.bias)
        return cls(tensors)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.layer_ids

    def factor(self, layer_id: str, name: str) -> torch.Tensor | None:
        key = _key(f"{layer_id}.{name}")
        if key not in self.factors:
            return None
        return torch.clamp(self.factors[key], *SCALE_RANGE)

    def scaled(self, layer: Layer) -> tuple[torch.Tensor, torch.Tensor | None]:
        w, b = layer.weights, layer.bias
        if layer.id in self:
            w = w * self.factor(layer.id, "weights")
            if b is not None:
                b = b * self.factor(layer.id, "bias")
        return w, b

    def bake(self, graph: Graph) -> Graph:
        "A copy of the graph with the clipped factors multiplied into its weights and biases."
        g = graph.copy()
        with torch.no_grad():
            for layer in g.layers_of_kind(*WEIGHTED_KINDS):
                layer.weights, layer.bias = (
                    None if t is None else t.detach().clone() for t in self.scaled(layer)
                )
        return g

    def to_dict(self) -> dict:
        d = {}
        for layer_id in self.layer_ids:
            d[layer_id] = {}
            for name in ("weights", "bias"):
                f = self.factor(layer_id, name)
                if f is not None:
                    d[layer_id][name] = f.detach().tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PointwiseScales:
        return cls({
            layer_id: {name: torch.tensor(v, dtype=torch.float64) for name, v in entry.items()}
            for layer_id, entry in d.items()
        })


class FakeQuantNetwork(nn.Module):
    """The student: shares the (frozen) weight tensors of `graph` and owns only the trainable
    threshold scales of every site, plus optional pointwise scales."""

    def __init__(
        self,
        graph: Graph,
        params: dict[str, QuantParams],
        scales: PointwiseScales = None,
        surrogate: bool = False,
    ):
        super().__init__()
        self.graph = graph
        self.surrogate = surrogate
        self.scales = scales
        self.activation_sites = activation_sites(graph)
        self.weight_sites = {layer.id: weight_site(layer.id) for layer in graph.layers_of_kind(*WEIGHTED_KINDS)}
        self.base_params = {}
        for site in self.activation_sites + list(self.weight_sites.values()):
            if site not in params:
                raise MissingSiteParams(site)
            self.base_params[site] = params[site]

        self.alpha = nn.ParameterDict()
        self.alpha_t = nn.ParameterDict()
        self.alpha_r = nn.ParameterDict()
        for site, p in self.base_params.items():
            if p.symmetric_mode:
                self.alpha[_key(site)] = nn.Parameter(p.alpha.clone())
            else:
                self.alpha_t[_key(site)] = nn.Parameter(p.alpha_t.clone())
                self.alpha_r[_key(site)] = nn.Parameter(p.alpha_r.clone())

    def threshold_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.alpha.values()
        yield from self.alpha_t.values()
        yield from self.alpha_r.values()

    def scale_parameters(self) -> Iterator[nn.Parameter]:
        if self.scales is not None:
            yield from self.scales.parameters()

    def _trainables(self, site: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        p, key = self.base_params[site], _key(site)
        if p.symmetric_mode:
            return self.alpha[key], p.alpha_t, p.alpha_r
        return p.alpha, self.alpha_t[key], self.alpha_r[key]

    def site_params(self, site: str) -> QuantParams:
        "Params of a site carrying the live trainable tensors."
        return self.base_params[site].with_trainables(*self._trainables(site))

    def current_params(self) -> dict[str, QuantParams]:
        "Detached params of every site, trainables reported post-clip."
        return {site: self.site_params(site).detached() for site in self.base_params}

    def fake_quant(self, site: str, x: torch.Tensor) -> torch.Tensor:
        return FakeQuantize.apply(x, *self._trainables(site), self.base_params[site], self.surrogate)

    def _fake_quant_bias(self, layer: Layer, b: torch.Tensor) -> torch.Tensor:
        if self.surrogate:
            return b
        s_i = scale_and_zero_point(self.site_params(layer.inputs[0]))[0].detach()
        s_w = scale_and_zero_point(self.site_params(self.weight_sites[layer.id]))[0].detach()
        b_q = quantize_bias(b, s_i, s_w).to(torch.float64) / (s_i * s_w)
        # straight-through to the bias only
        return b + (b_q - b).detach()

    def quantized_weights(self, layer: Layer) -> tuple[torch.Tensor, torch.Tensor | None]:
        w, b = self.scales.scaled(layer) if self.scales is not None else (layer.weights, layer.bias)
        w = self.fake_quant(self.weight_sites[layer.id], w)
        if b is not None:
            b = self._fake_quant_bias(layer, b)
        return w, b

    def forward(
        self, x: torch.Tensor, return_codes: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Fake-quant logits; with `return_codes` also the integer codes of every activation site."""
        g = self.graph
        codes = {}
        sites = set(self.activation_sites)

        def quantized(site, v):
            if return_codes:
                codes[site] = quantize_tensor(v, self.site_params(site))
            return self.fake_quant(site, v)

        values = {g.input_id: quantized(g.input_id, x)}
        for layer in g.layers:
            args = [values[ref] for ref in layer.inputs]
            inp = tuple(args) if layer.kind == LayerKind.ADD else args[0]
            weights, bias = self.quantized_weights(layer) if layer.kind in WEIGHTED_KINDS else (layer.weights, layer.bias)
            out = forward(layer.kernel, inp, weights, bias)
            values[layer.id] = quantized(layer.id, out) if layer.id in sites else out
            if layer.id == g.logits_id:
                break

        logits = values[g.logits_id]
        return (logits, codes) if return_codes else logits
