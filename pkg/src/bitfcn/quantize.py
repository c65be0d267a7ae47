"""Deterministic uniform quantizers and the straight-through estimator.

Conventions, fixed for the whole engine:
- Activations live in [0, 1]; the clamp to that range is the network's
  nonlinearity. Codes are ca = round((2^k - 1) * a), dequantized as
  a = ca / (2^k - 1), so the activation zero-point is 0.
- Weights live in [-1, 1] with a symmetric codebook: cw = round((2^k - 1)
  * (w + 1) / 2), dequantized as w = cw * 2/(2^k - 1) - 1. For k=1 the
  codebook is exactly {-1, +1}.
- Rounding ties go away from zero, everywhere.
- k = 32 is a sentinel meaning full precision; callers bypass quantization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BadBitWidth, ShapeMismatch

FULL_PRECISION = 32


def _check_bit_width(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= int(k) <= 8:
        raise BadBitWidth(f"bit-width must be an integer in [1, 8], got {k!r}")


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer bit-widths plus the derived affine dequantization parameters."""

    k_w: int
    k_a: int

    def __post_init__(self):
        for k in (self.k_w, self.k_a):
            if k != FULL_PRECISION:
                _check_bit_width(k)

    @property
    def quantized(self) -> bool:
        return self.k_w != FULL_PRECISION or self.k_a != FULL_PRECISION

    @property
    def w_levels(self) -> int:
        return (1 << self.k_w) - 1

    @property
    def a_levels(self) -> int:
        return (1 << self.k_a) - 1

    @property
    def w_scale(self) -> float:
        # dequantized weight = code * w_scale - 1
        return 1.0 if self.k_w == FULL_PRECISION else 2.0 / self.w_levels

    @property
    def w_zero(self) -> float:
        # codebook midpoint; folded into the "- 1" of the dequantization
        return 0.0 if self.k_w == FULL_PRECISION else self.w_levels / 2.0

    @property
    def a_scale(self) -> float:
        return 1.0 if self.k_a == FULL_PRECISION else 1.0 / self.a_levels

    @property
    def a_zero(self) -> int:
        return 0


class QuantizedTensor(NamedTuple):
    codes: np.ndarray
    values: np.ndarray
    scale: float


def quantize_unit(x, k: int):
    """Quantize values in [0, 1] to k bits.

    Returns (code, value) with code = round((2^k - 1) * clamp(x, 0, 1)),
    ties away from zero, and value = code / (2^k - 1).
    """
    _check_bit_width(k)
    x = np.asarray(x, dtype=np.float64)
    levels = (1 << int(k)) - 1
    clamped = np.clip(x, 0.0, 1.0)
    # operands are non-negative, so floor(t + 0.5) is round-half-away-from-zero
    code = np.floor(clamped * levels + 0.5).astype(np.uint8)
    value = code.astype(np.float64) / levels
    return code, value


def quantize_weights(w, k: int) -> QuantizedTensor:
    """Quantize weights to the symmetric k-bit codebook on [-1, 1]."""
    _check_bit_width(k)
    w = np.asarray(w, dtype=np.float64)
    unit = (np.clip(w, -1.0, 1.0) + 1.0) / 2.0
    code, unit_value = quantize_unit(unit, k)
    levels = (1 << int(k)) - 1
    return QuantizedTensor(code, unit_value * 2.0 - 1.0, 2.0 / levels)


def quantize_activations(a, k: int) -> QuantizedTensor:
    """Clamp activations to [0, 1] and quantize to k bits (zero-point 0)."""
    _check_bit_width(k)
    code, value = quantize_unit(a, k)
    levels = (1 << int(k)) - 1
    return QuantizedTensor(code, value, 1.0 / levels)


def ste_grad(upstream, preclamp_input, lo: float, hi: float) -> np.ndarray:
    """Straight-through gradient: pass upstream where lo <= input <= hi, else 0."""
    upstream = np.asarray(upstream, dtype=np.float64)
    pre = np.asarray(preclamp_input, dtype=np.float64)
    if upstream.shape != pre.shape:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} != input shape {pre.shape}"
        )
    mask = (pre >= lo) & (pre <= hi)
    return np.where(mask, upstream, 0.0)


def quantization_error_bound(k: int) -> float:
    """Per-value error model 1/2^k used by the bit allocation analysis.

    This is the coarse model the allocation formulas are built on; the
    implemented quantizer's true bound is the tighter 1/(2*(2^k - 1)).
    """
    if int(k) < 1:
        raise BadBitWidth(f"bit-width must be >= 1, got {k!r}")
    return 1.0 / (1 << int(k))
