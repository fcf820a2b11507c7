"""Integer inference: int8 operands, int32 accumulators, real-valued requantization multipliers."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import torch

from core.exceptions import AccumulatorOverflow, MissingSiteParams
from core.graph import Graph
from core.kernels import RELU6_SATURATION, LayerKernel, LayerKind, WEIGHTED_KINDS, forward
from quant.calibration import activation_sites, fused_activation, weight_site
from quant.quantizer import (
    INT32_MAX,
    QuantParams,
    dequantize,
    quantize_bias,
    quantize_tensor,
    round_half_away,
    scale_and_zero_point,
)
from quant.simulate import PointwiseScales

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class QuantizedLayer:
    id: str
    kernel: LayerKernel
    inputs: list[str]
    out_site: str  # where the output codes are stored; the fused activation's id for fused layers
    fused: LayerKind = None
    weights: torch.Tensor = None  # int64 codes in [-(2^(n-1)-1), 2^(n-1)-1]
    bias: torch.Tensor = None  # int32, accumulator units
    weight_params: QuantParams = None
    multiplier: torch.Tensor = None  # S_out / (S_in * S_w), per output channel or 0-d

    @property
    def kind(self) -> LayerKind:
        return self.kernel.kind

    @property
    def is_mac(self) -> bool:
        return self.kind in WEIGHTED_KINDS


@dataclass(eq=False)
class QuantizedModel:
    layers: list[QuantizedLayer]
    sites: dict[str, QuantParams]  # activation sites
    input_id: str
    logits_id: str  # site id holding the logits codes
    metadata: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.layers)


def compile(g: Graph, params: dict[str, QuantParams], scales: PointwiseScales = None) -> QuantizedModel:
    """Quantize weights and biases and precompute requantization multipliers."""
    if scales is not None:
        g = scales.bake(g)
    sites = activation_sites(g)
    missing = [s for s in sites if s not in params]
    missing += [weight_site(layer.id) for layer in g.layers_of_kind(*WEIGHTED_KINDS) if weight_site(layer.id) not in params]
    if missing:
        raise MissingSiteParams(f"No quantization params for sites {missing}")
    site_params = {s: params[s].detached() for s in sites}

    layers, skip = [], set()
    for layer in g.layers:
        if layer.id in skip:
            pass
        elif layer.kind in WEIGHTED_KINDS:
            act = fused_activation(g, layer)
            out_site = act.id if act is not None else layer.id
            if act is not None:
                skip.add(act.id)
            p_w = params[weight_site(layer.id)].detached()
            s_in = scale_and_zero_point(site_params[layer.inputs[0]])[0]
            s_w = scale_and_zero_point(p_w)[0]
            s_out = scale_and_zero_point(site_params[out_site])[0]
            layers.append(QuantizedLayer(
                id=layer.id,
                kernel=layer.kernel,
                inputs=list(layer.inputs),
                out_site=out_site,
                fused=act.kind if act is not None else None,
                weights=quantize_tensor(layer.weights, p_w),
                bias=None if layer.bias is None else quantize_bias(layer.bias, s_in, s_w),
                weight_params=p_w,
                multiplier=s_out / (s_in * s_w),
            ))
        else:
            layers.append(QuantizedLayer(id=layer.id, kernel=layer.kernel, inputs=list(layer.inputs), out_site=layer.id))
        if layer.id == g.logits_id:
            break

    logger.info("Compiled %d layers (%d MAC) over %d activation sites", len(layers), sum(q.is_mac for q in layers), len(sites))
    return QuantizedModel(layers=layers, sites=site_params, input_id=g.input_id, logits_id=g.logits_id)


def _check_int32(layer_id: str, acc: torch.Tensor):
    if acc.numel() and float(acc.abs().max()) > INT32_MAX:
        value = acc.flatten()[acc.abs().flatten().argmax()]
        raise AccumulatorOverflow(layer_id, int(value))


def _per_channel(v: torch.Tensor, acc: torch.Tensor) -> torch.Tensor:
    "Broadcast a per-output-channel vector over an [N, C, ...] accumulator."
    if v.dim() == 0:
        return v
    return v.reshape([1, -1] + [1] * (acc.dim() - 2))


def _run_mac(m: QuantizedModel, ql: QuantizedLayer, codes: dict[str, torch.Tensor]) -> torch.Tensor:
    p_in, p_out = m.sites[ql.inputs[0]], m.sites[ql.out_site]
    _, zp_in = scale_and_zero_point(p_in)
    # integer-valued float64 is exact far beyond the int32 range
    x = (codes[ql.inputs[0]] - zp_in).to(torch.float64)
    acc = forward(ql.kernel, x, ql.weights.to(torch.float64))
    _check_int32(ql.id, acc)
    if ql.bias is not None:
        acc = acc + _per_channel(ql.bias.to(torch.float64), acc)
        _check_int32(ql.id, acc)

    s_out, zp_out = scale_and_zero_point(p_out)
    v = round_half_away(_per_channel(ql.multiplier, acc) * acc)
    if ql.fused == LayerKind.RELU:
        v = torch.clamp(v, min=0)
    elif ql.fused == LayerKind.RELU6:
        v = torch.clamp(v, 0, float(round_half_away(RELU6_SATURATION * s_out)))
    return torch.clamp(v + zp_out.to(torch.float64), p_out.qmin, p_out.qmax).to(torch.int64)


def _run_float(m: QuantizedModel, ql: QuantizedLayer, codes: dict[str, torch.Tensor]) -> torch.Tensor:
    "Non-MAC layers: dequantize -> float kernel -> quantize, the same expression the simulation evaluates."
    args = [dequantize(codes[ref], m.sites[ref]) for ref in ql.inputs]
    inp = tuple(args) if ql.kind == LayerKind.ADD else args[0]
    return quantize_tensor(forward(ql.kernel, inp), m.sites[ql.out_site])


def run_int8(
    m: QuantizedModel, x: torch.Tensor, return_codes: bool = False
) -> torch.Tensor | tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Quantize the float input, run every layer on integer codes and dequantize the logits."""
    codes = {m.input_id: quantize_tensor(x, m.sites[m.input_id])}
    for ql in m.layers:
        codes[ql.out_site] = _run_mac(m, ql, codes) if ql.is_mac else _run_float(m, ql, codes)
    logits = dequantize(codes[m.logits_id], m.sites[m.logits_id])
    return (logits, codes) if return_codes else logits
