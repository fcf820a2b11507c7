"""Quantization sites of a folded float graph, calibration statistics and initial QuantParams."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
from typing import Literal

import torch

from core.datasets import Dataset
from core.exceptions import EmptyCalibration, UnsupportedKind
from core.graph import Graph, Layer, iter_batches
from core.kernels import LayerKind, WEIGHTED_KINDS
from .quantizer import QuantMode, QuantParams

logger = logging.getLogger(__name__)

WEIGHT_SUFFIX = ".weight"


@dataclass
class QuantConfig:
    bits: int = 8
    mode: Literal["sym", "asym"] = "sym"  # activation sites; weights are always symmetric
    granularity: Literal["scalar", "vector"] = "scalar"
    dws_granularity: Literal["scalar", "vector"] = "vector"  # DWS weights default to per-filter thresholds

    def __post_init__(self):
        assert self.mode in ("sym", "asym"), f"Unknown mode {self.mode}"
        assert self.granularity in ("scalar", "vector"), f"Unknown granularity {self.granularity}"
        assert self.dws_granularity in ("scalar", "vector"), f"Unknown granularity {self.dws_granularity}"

    def weight_granularity(self, kind: LayerKind) -> str:
        return self.dws_granularity if kind == LayerKind.DWS_CONV2D else self.granularity

    def to_dict(self):
        return asdict(self)


def weight_site(layer_id: str) -> str:
    return layer_id + WEIGHT_SUFFIX


def fused_activation(graph: Graph, layer: Layer) -> Layer | None:
    "The ReLU/ReLU6 fused into a weighted layer (its only consumer), if any."
    if layer.kind not in WEIGHTED_KINDS:
        return None
    consumers = graph.consumers(layer.id)
    if len(consumers) == 1 and consumers[0].kind.is_activation:
        return consumers[0]
    return None


def check_quantizable(graph: Graph):
    if graph.layers_of_kind(LayerKind.BATCH_NORM):
        raise UnsupportedKind("BatchNorm layers must be folded before quantization")


def activation_sites(graph: Graph) -> list[str]:
    """Ids of every tensor that is quantized at inference: the network input and each layer output
    up to the logits, except weighted layers whose activation is fused into them."""
    check_quantizable(graph)
    sites = [graph.input_id]
    for layer in graph.layers:
        if fused_activation(graph, layer) is None:
            sites.append(layer.id)
        if layer.id == graph.logits_id:
            break
    return sites


def site_signed(graph: Graph, site: str) -> bool:
    "Sites fed by ReLU/ReLU6 are unsigned; pooling keeps its input's signedness."
    if site == graph.input_id:
        return True
    layer = graph[site]
    if layer.kind.is_activation:
        return False
    if layer.kind == LayerKind.AVG_POOL:
        return site_signed(graph, layer.inputs[0])
    return True


@dataclass
class CalibStats:
    act_min: dict[str, float] = field(default_factory=dict)
    act_max: dict[str, float] = field(default_factory=dict)
    weight_max_abs: dict[str, float] = field(default_factory=dict)
    weight_channel_max_abs: dict[str, torch.Tensor] = field(default_factory=dict)
    n_samples: int = 0

    def update_activation(self, site: str, t: torch.Tensor):
        lo, hi = float(t.min()), float(t.max())
        self.act_min[site] = min(lo, self.act_min.get(site, lo))
        self.act_max[site] = max(hi, self.act_max.get(site, hi))

    def set_weights(self, site: str, w: torch.Tensor):
        self.weight_max_abs[site] = float(w.abs().max())
        self.weight_channel_max_abs[site] = w.abs().reshape(w.shape[0], -1).amax(dim=1)

    def to_dict(self) -> dict:
        return {
            "act_min": self.act_min,
            "act_max": self.act_max,
            "weight_max_abs": self.weight_max_abs,
            "weight_channel_max_abs": {k: v.tolist() for k, v in self.weight_channel_max_abs.items()},
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibStats:
        return cls(
            act_min=dict(d["act_min"]),
            act_max=dict(d["act_max"]),
            weight_max_abs=dict(d["weight_max_abs"]),
            weight_channel_max_abs={
                k: torch.tensor(v, dtype=torch.float64) for k, v in d["weight_channel_max_abs"].items()
            },
            n_samples=d["n_samples"],
        )


def calibrate(g: Graph, data: Dataset | torch.Tensor, batch_size: int = 100) -> CalibStats:
    """Running min/max at every activation site and max |W| (per tensor and per filter) of every weight."""
    images = data.images if isinstance(data, Dataset) else data
    if images.shape[0] == 0:
        raise EmptyCalibration("Calibration data is empty")

    sites = activation_sites(g)
    stats = CalibStats()
    with torch.no_grad():
        for batch in iter_batches(images, batch_size):
            values = g.run(batch, upto=g.logits_id, capture=True)
            for site in sites:
                stats.update_activation(site, values[site])
            stats.n_samples += batch.shape[0]

    for layer in g.layers_of_kind(*WEIGHTED_KINDS):
        stats.set_weights(weight_site(layer.id), layer.weights)

    logger.info("Calibrated %d activation sites on %d samples", len(sites), stats.n_samples)
    return stats


def build_params(g: Graph, stats: CalibStats, cfg: QuantConfig = None) -> dict[str, QuantParams]:
    """Initial QuantParams for every site from calibration statistics (all trainables at identity)."""
    cfg = cfg or QuantConfig()
    params = {}
    for site in activation_sites(g):
        signed = site_signed(g, site)
        lo, hi = stats.act_min[site], stats.act_max[site]
        if cfg.mode == "asym":
            params[site] = QuantParams.asymmetric(lo, hi, signed=signed, bits=cfg.bits)
        else:
            t_max = max(abs(lo), abs(hi)) if signed else max(hi, 0.0)
            params[site] = QuantParams.symmetric(t_max, signed=signed, bits=cfg.bits)

    for layer in g.layers_of_kind(*WEIGHTED_KINDS):
        site = weight_site(layer.id)
        if cfg.weight_granularity(layer.kind) == "vector":
            params[site] = QuantParams.symmetric(stats.weight_channel_max_abs[site], bits=cfg.bits, axis=0)
        else:
            params[site] = QuantParams.symmetric(stats.weight_max_abs[site], bits=cfg.bits)
    return params


def params_to_dict(params: dict[str, QuantParams]) -> dict:
    return {site: p.to_dict() for site, p in params.items()}


def params_from_dict(d: dict) -> dict[str, QuantParams]:
    return {site: QuantParams.from_dict(v) for site, v in d.items()}


__all__ = [
    "QuantConfig", "QuantMode", "CalibStats", "calibrate", "build_params", "activation_sites",
    "site_signed", "weight_site", "fused_activation", "params_to_dict", "params_from_dict",
]
