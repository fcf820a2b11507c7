"""Forward and backward kernels for every layer kind the quantization pipeline handles.

All float computation is float64, NCHW, zero padding only. A kernel's backward is the
autograd adjoint of the very same forward expression.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import EmptyTensor, ShapeMismatch, UnsupportedKind
from .utils import MyEnum

RELU6_SATURATION = 6.0

KernelInput = Union[torch.Tensor, Sequence[torch.Tensor]]


class LayerKind(MyEnum):
    CONV2D = "Conv2D"
    DWS_CONV2D = "DWSConv2D"
    FULLY_CONNECTED = "FullyConnected"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    RELU6 = "ReLU6"
    AVG_POOL = "AvgPool"
    SOFTMAX = "Softmax"
    ADD = "Add"

    @property
    def has_weights(self) -> bool:
        return self in WEIGHTED_KINDS

    @property
    def is_activation(self) -> bool:
        return self in (LayerKind.RELU, LayerKind.RELU6)


# Kinds that multiply-accumulate against a weight blob
WEIGHTED_KINDS = (LayerKind.CONV2D, LayerKind.DWS_CONV2D, LayerKind.FULLY_CONNECTED)


@dataclass(frozen=True)
class LayerKernel:
    kind: LayerKind
    stride: int = 1
    padding: int = 0
    kernel_size: int = None  # AvgPool only; None means global pooling
    eps: float = 1e-5  # BatchNorm only

    def params(self) -> dict:
        "Hyperparameters relevant to this kind, as stored in the model manifest."
        if self.kind in (LayerKind.CONV2D, LayerKind.DWS_CONV2D):
            return {"stride": self.stride, "padding": self.padding}
        if self.kind == LayerKind.AVG_POOL:
            return {"kernel_size": self.kernel_size, "stride": self.stride}
        if self.kind == LayerKind.BATCH_NORM:
            return {"eps": self.eps}
        return {}

    @classmethod
    def from_params(cls, kind: str | LayerKind, params: dict = None) -> LayerKernel:
        if not isinstance(kind, LayerKind):
            try:
                kind = LayerKind.from_value(kind)
            except ValueError as e:
                raise UnsupportedKind(str(e)) from e
        return cls(kind=kind, **(params or {}))


def _check_conv(kernel: LayerKernel, x: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor):
    if weights is None:
        raise ShapeMismatch(f"{kernel.kind.value} requires weights")
    if x.dim() != 4 or weights.dim() != 4:
        raise ShapeMismatch(f"{kernel.kind.value} expects 4-D input and weights, got {tuple(x.shape)}, {tuple(weights.shape)}")
    if kernel.kind == LayerKind.DWS_CONV2D:
        if weights.shape[1] != 1 or weights.shape[0] != x.shape[1]:
            raise ShapeMismatch(f"DWSConv2D weights {tuple(weights.shape)} do not match {x.shape[1]} input channels")
    elif weights.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"Conv2D weights {tuple(weights.shape)} do not match {x.shape[1]} input channels")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeMismatch(f"bias shape {tuple(bias.shape)} does not match {weights.shape[0]} output channels")


def forward(
    kernel: LayerKernel,
    input: KernelInput,
    weights: torch.Tensor = None,
    bias: torch.Tensor = None,
) -> torch.Tensor:
    kind = kernel.kind
    if kind == LayerKind.ADD:
        if len(input) != 2:
            raise ShapeMismatch(f"Add takes two inputs, got {len(input)}")
        a, b = input
        if a.shape != b.shape:
            raise ShapeMismatch(f"Add inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        return a + b

    x = input
    if kind == LayerKind.CONV2D:
        _check_conv(kernel, x, weights, bias)
        return F.conv2d(x, weights, bias, stride=kernel.stride, padding=kernel.padding)

    if kind == LayerKind.DWS_CONV2D:
        _check_conv(kernel, x, weights, bias)
        return F.conv2d(x, weights, bias, stride=kernel.stride, padding=kernel.padding, groups=x.shape[1])

    if kind == LayerKind.FULLY_CONNECTED:
        if weights is None or weights.dim() != 2:
            raise ShapeMismatch("FullyConnected expects 2-D weights [out, in]")
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != weights.shape[1]:
            raise ShapeMismatch(f"FullyConnected weights {tuple(weights.shape)} do not match {x.shape[1]} input features")
        if bias is not None and bias.shape != (weights.shape[0],):
            raise ShapeMismatch(f"bias shape {tuple(bias.shape)} does not match {weights.shape[0]} outputs")
        return F.linear(x, weights, bias)

    if kind == LayerKind.BATCH_NORM:
        if weights is None or weights.dim() != 2 or weights.shape[0] != 4 or weights.shape[1] != x.shape[1]:
            raise ShapeMismatch(f"BatchNorm expects [4, {x.shape[1]}] parameters (gamma, beta, mean, var)")
        gamma, beta, mean, var = weights
        assert kernel.eps > 0, "BatchNorm eps must be positive"
        assert bool((var >= 0).all()), "BatchNorm variance must be non-negative"
        shape = [1, -1] + [1] * (x.dim() - 2)
        scale = gamma / torch.sqrt(var + kernel.eps)
        return (x - mean.reshape(shape)) * scale.reshape(shape) + beta.reshape(shape)

    if kind == LayerKind.RELU:
        return F.relu(x)

    if kind == LayerKind.RELU6:
        return torch.clamp(x, 0.0, RELU6_SATURATION)

    if kind == LayerKind.AVG_POOL:
        if x.dim() != 4:
            raise ShapeMismatch(f"AvgPool expects 4-D input, got {tuple(x.shape)}")
        size = kernel.kernel_size or tuple(x.shape[-2:])
        stride = kernel.stride if kernel.kernel_size else size
        return F.avg_pool2d(x, size, stride=stride)

    if kind == LayerKind.SOFTMAX:
        return F.softmax(x, dim=1)

    raise UnsupportedKind(f"No forward kernel for {kind}")


def backward(
    kernel: LayerKernel,
    input: KernelInput,
    grad_out: torch.Tensor,
    weights: torch.Tensor = None,
    bias: torch.Tensor = None,
) -> tuple[KernelInput, torch.Tensor | None, torch.Tensor | None]:
    """Gradients of a scalar loss w.r.t. input, weights and bias given dL/d(output).

    For Add, grad_input is a tuple with one gradient per input.
    """
    is_add = kernel.kind == LayerKind.ADD
    inputs = [t.detach().requires_grad_(True) for t in input] if is_add else [input.detach().requires_grad_(True)]
    w = weights.detach().requires_grad_(True) if weights is not None else None
    b = bias.detach().requires_grad_(True) if bias is not None else None

    with torch.enable_grad():
        out = forward(kernel, tuple(inputs) if is_add else inputs[0], w, b)
        if out.shape != grad_out.shape:
            raise ShapeMismatch(f"grad_out shape {tuple(grad_out.shape)} does not match output {tuple(out.shape)}")
        wrt = inputs + [t for t in (w, b) if t is not None]
        grads = torch.autograd.grad(out, wrt, grad_out, allow_unused=True)

    grads = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, wrt)]
    grad_input = tuple(grads[:2]) if is_add else grads[0]
    rest = iter(grads[len(inputs):])
    grad_w = next(rest) if w is not None else None
    grad_b = next(rest) if b is not None else None
    return grad_input, grad_w, grad_b


def histogram(t: torch.Tensor, bins: int) -> list[tuple[float, int]]:
    "Equal-width histogram over [min, max] as (left bin edge, count) pairs."
    if t.numel() == 0:
        raise EmptyTensor("Cannot build a histogram of an empty tensor")
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    values = t.detach().to(torch.float64).cpu().numpy().ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return [(lo, int(values.size))]
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [(float(edge), int(count)) for edge, count in zip(edges[:-1], counts)]


def histogram_report(t: torch.Tensor, bins: int = 20, width: int = 40, title: str = None) -> str:
    hist = histogram(t, bins)
    peak = max(count for _, count in hist)
    lines = [title] if title else []
    for edge, count in hist:
        bar = "#" * (round(width * count / peak) if peak else 0)
        lines.append(f"{edge:+12.5g} | {count:8d} {bar}")
    return "\n".join(lines)
