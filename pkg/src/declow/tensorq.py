"""Affine 8-bit quantization with a straight-through gradient estimator.

Tensors are plain float64 numpy arrays throughout the package; this module
provides the quantize/dequantize pair used for weights, activations and
layer gradients, plus the gradient rule for backpropagating through the
quantizer.
"""

from dataclasses import dataclass

import numpy as np

# Scale fallback for a degenerate (constant-zero) range.
EPS_SCALE = 1e-8


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round with ties going toward +inf (floor(x + 0.5)).

    numpy's default rounds half to even, which would make quantized values
    depend on the parity of the tie's neighbour; half-up is order-preserving
    and reproducible across platforms.
    """
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def range_lo(self) -> float:
        """Smallest representable real value."""
        return (0 - self.zero_point) * self.scale

    @property
    def range_hi(self) -> float:
        """Largest representable real value."""
        return (self.qmax - self.zero_point) * self.scale


@dataclass(frozen=True)
class QuantTensor:
    qdata: np.ndarray  # uint8
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.qdata.shape


def quant_params_from_range(lo: float, hi: float, bits: int = 8) -> QuantParams:
    """Affine parameters covering [lo, hi] with 2^bits levels."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError(f"range bounds must be finite, got [{lo}, {hi}]")
    if lo > hi:
        raise ValueError(f"invalid range: lo {lo} > hi {hi}")
    qmax = (1 << bits) - 1
    if hi > lo:
        scale = (hi - lo) / qmax
    else:
        scale = EPS_SCALE
    zero_point = int(np.clip(round_half_up(-lo / scale), 0, qmax))
    return QuantParams(scale=scale, zero_point=zero_point, bits=bits)


def quant_params_for(x: np.ndarray, bits: int = 8) -> QuantParams:
    """Per-tensor parameters from the tensor's min/max.

    The range is widened to include zero so that 0.0 is exactly
    representable (gemmlowp convention); this also makes constant tensors
    round-trip exactly instead of collapsing onto the epsilon scale.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return quant_params_from_range(0.0, 0.0, bits)
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("tensor contains non-finite values")
    return quant_params_from_range(lo, hi, bits)


def quantize(x: np.ndarray, p: QuantParams) -> QuantTensor:
    """q = clamp(round(x/scale) + zero_point, 0, qmax), saturating."""
    x = np.asarray(x, dtype=np.float64)
    q = round_half_up(x / p.scale) + p.zero_point
    q = np.clip(q, 0, p.qmax)
    return QuantTensor(qdata=q.astype(np.uint8), params=p)


def dequantize(q: QuantTensor) -> np.ndarray:
    return (q.qdata.astype(np.float64) - q.params.zero_point) * q.params.scale


def qdq(x: np.ndarray, p: QuantParams | None = None) -> np.ndarray:
    """Quantize-dequantize: project x onto the 8-bit grid.

    With p omitted the grid is calibrated from x itself (min/max range).
    """
    if p is None:
        p = quant_params_for(x)
    return dequantize(quantize(x, p))


def ste_grad(
    upstream: np.ndarray, x: np.ndarray, p: QuantParams, clip: bool = True
) -> np.ndarray:
    """Straight-through gradient of qdq at x.

    Clipped variant (default): passes upstream through unchanged where x is
    inside the representable range and zeroes it where the quantizer
    saturated. clip=False gives the plain identity estimator.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs x {x.shape}")
    if not clip:
        return upstream.copy()
    inside = (x >= p.range_lo) & (x <= p.range_hi)
    return np.where(inside, upstream, 0.0)
