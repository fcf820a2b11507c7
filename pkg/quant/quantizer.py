"""Uniform quantization with trainable threshold scales.

Scales are "integer codes per unit real value": S = levels / T. Rounding is half away from
zero everywhere, so the integer engine and the fake-quant simulation agree on ties.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import warnings

import torch

from core.exceptions import NonFiniteInput, ShapeMismatch
from core.utils import MyEnum

ALPHA_RANGE = (0.5, 1.0)
ALPHA_R_RANGE = (0.5, 1.0)
ALPHA_T_RANGE_SIGNED = (-0.2, 0.4)
ALPHA_T_RANGE_UNSIGNED = (0.0, 0.4)

THRESHOLD_FLOOR = 1e-12
INT32_MAX = 2**31 - 1


class QuantMode(MyEnum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


def _f64(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v.detach().to(torch.float64).clone()
    return torch.tensor(v, dtype=torch.float64)


def _floored(t: torch.Tensor, what: str) -> torch.Tensor:
    if bool((t < THRESHOLD_FLOOR).any()):
        warnings.warn(f"Degenerate {what} {t.min().item():g} floored at {THRESHOLD_FLOOR:g}", stacklevel=3)
        t = torch.clamp(t, min=THRESHOLD_FLOOR)
    return t


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Quantization of one tensor site.

    Thresholds and trainables are float64 tensors: 0-d for per-tensor granularity, or one value
    per channel along `axis`. Trainables (alpha, alpha_t, alpha_r) are stored raw and always
    evaluated through their clip.
    """
    bits: int = 8
    signed: bool = True
    mode: QuantMode = QuantMode.SYMMETRIC
    axis: int = None  # None: per-tensor
    t_max: torch.Tensor = None  # symmetric
    t_l: torch.Tensor = None  # asymmetric
    t_r: torch.Tensor = None
    alpha: torch.Tensor = field(default=None, compare=False)
    alpha_t: torch.Tensor = field(default=None, compare=False)
    alpha_r: torch.Tensor = field(default=None, compare=False)

    def __post_init__(self):
        assert 2 <= self.bits <= 16, f"Unsupported bit width {self.bits}"
        ref = self.t_max if self.mode == QuantMode.SYMMETRIC else self.t_l
        assert ref is not None, f"{self.mode.value} params need thresholds"
        # frozen dataclass: defaults for the trainables are filled in via object.__setattr__
        if self.alpha is None:
            object.__setattr__(self, "alpha", torch.ones_like(ref))
        if self.alpha_t is None:
            object.__setattr__(self, "alpha_t", torch.zeros_like(ref))
        if self.alpha_r is None:
            object.__setattr__(self, "alpha_r", torch.ones_like(ref))

    @classmethod
    def symmetric(cls, t_max, signed: bool = True, bits: int = 8, axis: int = None) -> QuantParams:
        t_max = _floored(_f64(t_max).abs(), "threshold")
        return cls(bits=bits, signed=signed, mode=QuantMode.SYMMETRIC, axis=axis, t_max=t_max)

    @classmethod
    def asymmetric(cls, t_l, t_r, signed: bool = True, bits: int = 8, axis: int = None) -> QuantParams:
        # zero must stay representable
        t_l = torch.clamp(_f64(t_l), max=0.0)
        t_r = torch.clamp(_f64(t_r), min=0.0)
        width = _floored(t_r - t_l, "threshold range")
        return cls(bits=bits, signed=signed, mode=QuantMode.ASYMMETRIC, axis=axis, t_l=t_l, t_r=t_l + width)

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    @property
    def symmetric_mode(self) -> bool:
        return self.mode == QuantMode.SYMMETRIC

    @property
    def levels(self) -> int:
        "Number of quantization steps between the two thresholds."
        if self.symmetric_mode and self.signed:
            return 2 ** (self.bits - 1) - 1
        return 2 ** self.bits - 1

    @property
    def qmin(self) -> int:
        return -self.levels if self.symmetric_mode and self.signed else 0

    @property
    def qmax(self) -> int:
        return self.levels

    @property
    def r(self) -> torch.Tensor:
        return self.t_r - self.t_l

    @property
    def alpha_t_range(self) -> tuple[float, float]:
        return ALPHA_T_RANGE_SIGNED if self.signed else ALPHA_T_RANGE_UNSIGNED

    def clipped_alpha(self, alpha=None) -> torch.Tensor:
        return torch.clamp(self.alpha if alpha is None else alpha, *ALPHA_RANGE)

    def clipped_alpha_t(self, alpha_t=None) -> torch.Tensor:
        return torch.clamp(self.alpha_t if alpha_t is None else alpha_t, *self.alpha_t_range)

    def clipped_alpha_r(self, alpha_r=None) -> torch.Tensor:
        return torch.clamp(self.alpha_r if alpha_r is None else alpha_r, *ALPHA_R_RANGE)

    def with_trainables(self, alpha=None, alpha_t=None, alpha_r=None) -> QuantParams:
        return replace(
            self,
            alpha=self.alpha if alpha is None else alpha,
            alpha_t=self.alpha_t if alpha_t is None else alpha_t,
            alpha_r=self.alpha_r if alpha_r is None else alpha_r,
        )

    def detached(self) -> QuantParams:
        "A copy whose trainables are plain float64 tensors, reported post-clip."
        return self.with_trainables(
            alpha=self.clipped_alpha().detach().clone(),
            alpha_t=self.clipped_alpha_t().detach().clone(),
            alpha_r=self.clipped_alpha_r().detach().clone(),
        )

    def to_dict(self) -> dict:
        d = {
            "bits": self.bits,
            "signed": self.signed,
            "mode": self.mode.value,
            "axis": self.axis,
            "alpha": self.clipped_alpha().detach(),
            "alpha_t": self.clipped_alpha_t().detach(),
            "alpha_r": self.clipped_alpha_r().detach(),
        }
        if self.symmetric_mode:
            d["t_max"] = self.t_max
        else:
            d["t_l"], d["t_r"] = self.t_l, self.t_r
        return d

    @classmethod
    def from_dict(cls, d: dict) -> QuantParams:
        tensors = {k: _f64(d[k]) for k in ("t_max", "t_l", "t_r", "alpha", "alpha_t", "alpha_r") if d.get(k) is not None}
        return cls(bits=d["bits"], signed=d["signed"], mode=QuantMode.from_value(d["mode"]), axis=d.get("axis"), **tensors)


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    a = v.abs()
    f = torch.floor(a)
    # a - floor(a) is exact in floating point, unlike floor(a + 0.5)
    r = f + (a - f >= 0.5).to(v.dtype)
    return torch.copysign(r, v)


def _broadcast(v: torch.Tensor, x: torch.Tensor, axis: int) -> torch.Tensor:
    "Shape a per-channel vector so it broadcasts along `axis` of x."
    if axis is None or v.dim() == 0:
        return v
    if x.shape[axis] != v.shape[0]:
        raise ShapeMismatch(f"{v.shape[0]} channel params for axis {axis} of shape {tuple(x.shape)}")
    shape = [1] * x.dim()
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def _reduce(t: torch.Tensor, axis: int) -> torch.Tensor:
    "Sum a gradient down to the shape of the site's params."
    if axis is None:
        return t.sum()
    return t.sum(dim=[d for d in range(t.dim()) if d != axis])


def adjusted_threshold(p: QuantParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Effective (T_lo, T_hi) after applying the clipped trainable scales."""
    if p.symmetric_mode:
        t_hi = p.clipped_alpha() * p.t_max
        t_lo = -t_hi if p.signed else torch.zeros_like(t_hi)
        return t_lo, t_hi
    r = p.r
    t_lo = p.t_l + p.clipped_alpha_t() * r
    t_hi = t_lo + p.clipped_alpha_r() * r
    return t_lo, t_hi


def scale_and_zero_point(p: QuantParams) -> tuple[torch.Tensor, torch.Tensor]:
    """S (codes per unit, float64) and integer zero point (int64), per tensor or per channel."""
    t_lo, t_hi = adjusted_threshold(p)
    if p.symmetric_mode:
        s = p.levels / t_hi
        return s, torch.zeros(s.shape, dtype=torch.int64)
    s = p.levels / (t_hi - t_lo)
    zp = torch.clamp(round_half_away(-s * t_lo), p.qmin, p.qmax).to(torch.int64)
    return s, zp


def _check_finite(x: torch.Tensor):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteInput("Cannot quantize non-finite values")


def quantize_tensor(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    _check_finite(x)
    s, zp = scale_and_zero_point(p)
    s, zp = _broadcast(s.detach(), x, p.axis), _broadcast(zp, x, p.axis)
    q = round_half_away(s * x.detach().to(torch.float64)) + zp.to(torch.float64)
    return torch.clamp(q, p.qmin, p.qmax).to(torch.int64)


def dequantize(q: torch.Tensor, p: QuantParams) -> torch.Tensor:
    s, zp = scale_and_zero_point(p)
    s, zp = _broadcast(s.detach(), q, p.axis), _broadcast(zp, q, p.axis)
    return (q - zp).to(torch.float64) / s


def surrogate_bounds(p: QuantParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Clip bounds (a, b) of the round-free surrogate: fake-quant with every round() deleted is clip(x, a, b)."""
    t_lo, t_hi = adjusted_threshold(p)
    if p.symmetric_mode:
        return t_lo, t_hi
    width = t_hi - t_lo
    zero = torch.zeros_like(t_lo)
    # zero point clamps at code 0 when T_lo >= 0 and at the top code when T_lo <= -width
    a = torch.where(t_lo >= 0, zero, torch.where(t_lo <= -width, -width, t_lo))
    b = torch.where(t_lo >= 0, width, torch.where(t_lo <= -width, zero, t_hi))
    return a, b


def fake_quant_forward(x: torch.Tensor, p: QuantParams, surrogate: bool = False) -> torch.Tensor:
    """dequantize(quantize_tensor(x)); with `surrogate` the round-free clip(x, a, b) instead."""
    _check_finite(x)
    if surrogate:
        a, b = surrogate_bounds(p)
        return torch.clamp(x, _broadcast(a, x, p.axis), _broadcast(b, x, p.axis))
    return dequantize(quantize_tensor(x, p), p)


def ste_backward(
    grad_out: torch.Tensor, x: torch.Tensor, p: QuantParams
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
    """Straight-through gradients: round has derivative 1, clip passes gradient only inside its bounds.

    Returns (grad_x, grad_alpha, grad_alpha_t, grad_alpha_r); the trainables a mode does not use
    get None.
    """
    if grad_out.shape != x.shape:
        raise ShapeMismatch(f"grad_out {tuple(grad_out.shape)} vs input {tuple(x.shape)}")
    a, b = surrogate_bounds(p)
    a, b = _broadcast(a, x, p.axis), _broadcast(b, x, p.axis)
    grad_x = grad_out * ((x >= a) & (x <= b)).to(grad_out.dtype)
    below = grad_out * (x < a).to(grad_out.dtype)
    above = grad_out * (x > b).to(grad_out.dtype)
    d_lo, d_hi = _reduce(below, p.axis), _reduce(above, p.axis)  # dL/da, dL/db

    if p.symmetric_mode:
        lo, hi = ALPHA_RANGE
        mask = ((p.alpha >= lo) & (p.alpha <= hi)).to(grad_out.dtype)
        d_t = d_hi - d_lo if p.signed else d_hi
        return grad_x, d_t * p.t_max * mask, None, None

    r = p.r
    t_lo, t_hi = adjusted_threshold(p)
    width = t_hi - t_lo
    lo_t, hi_t = p.alpha_t_range
    mask_t = ((p.alpha_t >= lo_t) & (p.alpha_t <= hi_t)).to(grad_out.dtype)
    mask_r = ((p.alpha_r >= ALPHA_R_RANGE[0]) & (p.alpha_r <= ALPHA_R_RANGE[1])).to(grad_out.dtype)
    inside = (t_lo > -width) & (t_lo < 0)
    low_clamped = t_lo >= 0
    zero = torch.zeros_like(d_lo)
    # interior: a = T_lo, b = T_lo + W; clamped at 0: a = 0, b = W; clamped at the top: a = -W, b = 0
    grad_t = torch.where(inside, d_lo + d_hi, zero) * r * mask_t
    grad_r = torch.where(inside | low_clamped, d_hi, -d_lo) * r * mask_r
    return grad_x, None, grad_t, grad_r


def quantize_bias(b: torch.Tensor, s_i: torch.Tensor | float, s_w: torch.Tensor | float) -> torch.Tensor:
    """int32 bias in accumulator units: clip(round(S_i * S_w * b), +-(2^31 - 1))."""
    _check_finite(b)
    v = round_half_away(_f64(s_i) * _f64(s_w) * b.detach().to(torch.float64))
    return torch.clamp(v, -INT32_MAX, INT32_MAX).to(torch.int64).to(torch.int32)
