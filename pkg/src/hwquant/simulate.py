"""Scale arithmetic and the fp32 simulated-quantize operator.

The operator reproduces three error sources in float32: rounding to the
integer grid, saturation at the effective-bit bounds, and overflow of the
producer's accumulator (modeled as saturation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import DType

PASSTHROUGH = math.inf


def round_half_away(x):
    """Round half away from zero; preserves the input dtype."""
    x = np.asarray(x)
    t = np.trunc(x)
    # x - t is exact in floating point, so the half test never misfires
    bump = (np.abs(x - t) >= 0.5).astype(x.dtype)
    return t + np.copysign(bump, x)


def compute_scale(threshold: float, bit: int, sign: int) -> float:
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if bit < 2:
        raise ValueError(f"bit must be >= 2, got {bit}")
    return threshold / 2.0 ** (bit - sign)


def quant_bounds(bit: int, sign: int) -> tuple[int, int]:
    if sign:
        return -(1 << (bit - 1)), (1 << (bit - 1)) - 1
    return 0, (1 << bit) - 1


@dataclass(frozen=True)
class QParams:
    """Parameters of one simulated_quantize node.

    ``dtype`` is the storage dtype the codes live in (float32 marks a
    dequantize boundary that only models accumulator overflow).
    ``acc_dtype``/``acc_scale`` describe the producer's accumulator, when the
    producer is itself quantized.
    """

    threshold: float
    bit: int
    sign: int
    dtype: DType
    zero_point: int = 0
    acc_dtype: Optional[DType] = None
    acc_scale: Optional[float] = None
    passthrough: bool = False

    def __post_init__(self):
        if self.passthrough:
            return
        if self.dtype.is_int:
            if not self.threshold > 0:
                raise ValueError(f"threshold must be positive, got {self.threshold}")
            if not 2 <= self.bit <= self.dtype.width:
                raise ValueError(f"bit {self.bit} outside [2, {self.dtype.width}] for {self.dtype}")
            if self.sign != int(self.dtype.signed):
                raise ValueError(f"sign={self.sign} incompatible with {self.dtype}")
        if (self.acc_dtype is None) != (self.acc_scale is None):
            raise ValueError("acc_dtype and acc_scale go together")

    @property
    def scale(self) -> float:
        return compute_scale(self.threshold, self.bit, self.sign)

    @property
    def bounds(self) -> tuple[int, int]:
        lo, hi = quant_bounds(self.bit, self.sign)
        return max(lo, self.dtype.min), min(hi, self.dtype.max)


def noop_params() -> QParams:
    return QParams(PASSTHROUGH, 0, 1, DType.float32, passthrough=True)


def asymmetric_params(low: float, threshold: float, bit: int) -> tuple[float, int]:
    """(range, zero_point) for an unsigned grid covering [low, threshold].

    ``low`` is clipped into [-threshold, 0] so the grid always contains 0.
    """
    low = min(0.0, max(low, -threshold))
    rng = threshold - low
    s = rng / 2.0 ** bit
    zp = int(np.clip(round_half_away(np.float64(-low / s)), 0, 2 ** bit - 1))
    return rng, zp


def quantize_codes(x: np.ndarray, scale: float, zero_point: int, qmin: int, qmax: int) -> np.ndarray:
    """float32 -> integer codes (as float32 values); shared by simulation and realization."""
    x = np.asarray(x, dtype=np.float32)
    q = round_half_away(x / np.float32(scale))
    if zero_point:
        q = q + np.float32(zero_point)
    return np.clip(q, np.float32(qmin), np.float32(qmax))


def overflow_clamp(x: np.ndarray, acc_dtype: DType, acc_scale: float) -> np.ndarray:
    lo = np.float32(acc_dtype.min) * np.float32(acc_scale)
    hi = np.float32(acc_dtype.max) * np.float32(acc_scale)
    return np.clip(x, lo, hi)


def simulated_quantize(x: np.ndarray, p: QParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if p.passthrough:
        return x
    if p.acc_dtype is not None and p.acc_dtype.is_int:
        x = overflow_clamp(x, p.acc_dtype, p.acc_scale)
    if p.dtype.is_float:
        return x
    s = np.float32(p.scale)
    qmin, qmax = p.bounds
    q = quantize_codes(x, s, p.zero_point, qmin, qmax)
    if p.zero_point:
        q = q - np.float32(p.zero_point)
    return q * s
