"""Float-to-float rewrites applied before quantization: batch-norm folding and DWS filter rescaling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import logging
import warnings

import torch

from core.datasets import Dataset
from core.exceptions import NonPositiveScale, NoPatternFound, OrphanBatchNorm, UnsupportedKind
from core.graph import Graph, Layer, iter_batches
from core.kernels import RELU6_SATURATION, LayerKind, WEIGHTED_KINDS

logger = logging.getLogger(__name__)

LOCK_LIMIT = 5.9


def fold_batch_norm(g: Graph) -> Graph:
    """Merge every BatchNorm into the weighted layer feeding it and drop the BN layer."""
    out = g.copy()
    for bn in g.layers_of_kind(LayerKind.BATCH_NORM):
        ref = bn.inputs[0]
        producer = out.producer(ref)
        if producer is None or producer.kind not in WEIGHTED_KINDS:
            raise OrphanBatchNorm(f"BatchNorm {bn.id!r} is not preceded by a Conv2D/DWSConv2D/FullyConnected layer")
        if len(out.consumers(producer.id)) != 1:
            raise OrphanBatchNorm(f"BatchNorm {bn.id!r} cannot be folded: {producer.id!r} has other consumers")

        gamma, beta, mean, var = out[bn.id].weights
        scale = gamma / torch.sqrt(var + bn.kernel.eps)
        shape = [-1] + [1] * (producer.weights.dim() - 1)
        bias = producer.bias if producer.bias is not None else torch.zeros_like(mean)
        producer.weights = producer.weights * scale.reshape(shape)
        producer.bias = scale * (bias - mean) + beta
        out = out.without(bn.id, rewire_to=producer.id)
        logger.debug("Folded %s into %s", bn.id, producer.id)
    return out


@dataclass
class DwsPattern:
    dws_id: str
    conv_id: str
    activation: str = None  # "ReLU", "ReLU6" or None
    scales: list[float] = field(default_factory=list)
    locked: list[bool] = field(default_factory=list)
    x_max: list[float] = field(default_factory=list)
    t0: float = None
    spread_before: float = None
    spread_after: float = None

    @property
    def capped(self) -> bool:
        return self.activation == LayerKind.RELU6.value


@dataclass
class DwsRescaleReport:
    patterns: list[DwsPattern] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)  # {"dws_id": ..., "reason": ...}
    lock_limit: float = LOCK_LIMIT
    saturation: float = RELU6_SATURATION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DwsRescaleReport:
        return cls(
            patterns=[DwsPattern(**p) for p in d["patterns"]],
            skipped=list(d["skipped"]),
            lock_limit=d["lock_limit"],
            saturation=d["saturation"],
        )


def _only_consumer(g: Graph, layer_id: str) -> tuple[Layer | None, str | None]:
    consumers = g.consumers(layer_id)
    if len(consumers) != 1:
        return None, f"{layer_id!r} has {len(consumers)} consumers"
    if consumers[0].kind == LayerKind.ADD:
        return None, f"{layer_id!r} feeds an Add junction"
    return consumers[0], None


def find_dws_patterns(g: Graph) -> tuple[list[DwsPattern], list[dict]]:
    "DWS -> [ReLU | ReLU6] -> Conv2D chains where each link is its producer's only consumer."
    patterns, skipped = [], []
    for dws in g.layers_of_kind(LayerKind.DWS_CONV2D):
        nxt, reason = _only_consumer(g, dws.id)
        activation = None
        if nxt is not None and nxt.kind.is_activation:
            activation = nxt.kind.value
            nxt, reason = _only_consumer(g, nxt.id)
        if nxt is not None and nxt.kind != LayerKind.CONV2D:
            nxt, reason = None, f"{dws.id!r} is followed by {nxt.kind.value}, not Conv2D"
        if nxt is None:
            skipped.append({"dws_id": dws.id, "reason": reason})
            continue
        patterns.append(DwsPattern(dws_id=dws.id, conv_id=nxt.id, activation=activation))
    return patterns, skipped


def filter_thresholds(w: torch.Tensor) -> torch.Tensor:
    "T(w_k): max |w| of each filter along axis 0."
    return w.abs().reshape(w.shape[0], -1).amax(dim=1)


def _spread(t: torch.Tensor) -> float:
    if t.numel() == 0:
        return 1.0
    return float(t.max() / t.min())


def channel_maxima(g: Graph, layer_ids: list[str], data: torch.Tensor, batch_size: int = 100) -> dict[str, torch.Tensor]:
    "Per-channel max of each layer's output (before any activation) over the data."
    maxima = {}
    with torch.no_grad():
        for batch in iter_batches(data, batch_size):
            values = g.run(batch, capture=True)
            for layer_id in layer_ids:
                m = values[layer_id].amax(dim=(0, 2, 3))
                maxima[layer_id] = m if layer_id not in maxima else torch.maximum(maxima[layer_id], m)
    return maxima


def rescale_factors(
    t: torch.Tensor, x_max: torch.Tensor, capped: bool, lock_limit: float = LOCK_LIMIT, sat: float = RELU6_SATURATION
) -> tuple[torch.Tensor, torch.Tensor, float]:
    """Per-channel scales S_W, the locked mask and the control threshold T0.

    Channels whose pre-activation max reaches `lock_limit` (and dead filters) keep S_W = 1. The rest
    are scaled towards T0, the mean threshold of the locked filters; with a ReLU6 the scale is
    capped so the channel's max stays below saturation.
    """
    dead = t == 0
    locked = (x_max >= lock_limit) | dead
    reference = locked & ~dead
    if not bool(reference.any()):
        reference = ~dead
    if not bool(reference.any()):
        return torch.ones_like(t), locked, 0.0
    t0 = t[reference].mean()

    s = torch.where(locked, torch.ones_like(t), t0 / torch.where(dead, torch.ones_like(t), t))
    if capped:
        cap = torch.where(x_max > 0, sat / torch.clamp(x_max, min=1e-300), torch.full_like(t, float("inf")))
        s = torch.where(locked, s, torch.minimum(s, cap))
    if not bool(((s > 0) & torch.isfinite(s)).all()):
        raise NonPositiveScale(f"Rescale produced non-positive scales {s.tolist()}")
    return s, locked, float(t0)


def dws_rescale(
    g: Graph,
    calib: Dataset | torch.Tensor,
    lock_limit: float = LOCK_LIMIT,
    sat: float = RELU6_SATURATION,
    batch_size: int = 100,
) -> tuple[Graph, DwsRescaleReport]:
    """Equalize per-filter thresholds of DWS layers, compensating in the following convolution."""
    if g.layers_of_kind(LayerKind.BATCH_NORM):
        raise UnsupportedKind("BatchNorm layers must be folded before rescaling")
    patterns, skipped = find_dws_patterns(g)
    for s in skipped:
        logger.info("Skipping DWS layer %s: %s", s["dws_id"], s["reason"])
    if not patterns:
        raise NoPatternFound("No DWS -> [ReLU|ReLU6] -> Conv2D pattern in the graph")

    data = calib.images if isinstance(calib, Dataset) else calib
    maxima = channel_maxima(g, [p.dws_id for p in patterns], data, batch_size)

    out = g.copy()
    for pattern in patterns:
        dws, conv = out[pattern.dws_id], out[pattern.conv_id]
        t = filter_thresholds(dws.weights)
        x_max = maxima[pattern.dws_id]
        s, locked, t0 = rescale_factors(t, x_max, pattern.capped, lock_limit, sat)

        dws.weights = dws.weights * s.reshape(-1, 1, 1, 1)
        if dws.bias is not None:
            dws.bias = dws.bias * s
        conv.weights = conv.weights / s.reshape(1, -1, 1, 1)

        live = ~locked
        pattern.scales = s.tolist()
        pattern.locked = locked.tolist()
        pattern.x_max = x_max.tolist()
        pattern.t0 = t0
        pattern.spread_before = _spread(t[live])
        pattern.spread_after = _spread((t * s)[live])
        if pattern.spread_after > pattern.spread_before * (1 + 1e-12):
            warnings.warn(
                f"Rescaling {pattern.dws_id} increased the threshold spread "
                f"({pattern.spread_before:.4g} -> {pattern.spread_after:.4g}); the saturation cap is binding",
                stacklevel=2,
            )
        logger.info(
            "Rescaled %s: %d/%d channels locked, T0 %.4g, spread %.4g -> %.4g",
            pattern.dws_id, int(locked.sum()), len(t), t0, pattern.spread_before, pattern.spread_after,
        )

    return out, DwsRescaleReport(patterns=patterns, skipped=skipped, lock_limit=lock_limit, saturation=sat)
