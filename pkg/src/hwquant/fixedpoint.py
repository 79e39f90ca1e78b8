"""Fixed-point multiply/shift requantization arithmetic."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class RequantParams(NamedTuple):
    multiplier: int
    shift: int

    @property
    def ratio(self) -> float:
        return math.ldexp(self.multiplier, -self.shift)


def requantize_params(s_in: float, s_out: float) -> RequantParams:
    """Decompose s_in / s_out as multiplier * 2**-shift, multiplier in [2**30, 2**31)."""
    if not (s_in > 0 and s_out > 0):
        raise ValueError(f"scales must be positive, got {s_in}, {s_out}")
    m, e = math.frexp(s_in / s_out)  # ratio = m * 2**e, m in [0.5, 1)
    multiplier = math.floor(m * 2.0 ** 31 + 0.5)
    shift = 31 - e
    if multiplier == 1 << 31:
        multiplier >>= 1
        shift -= 1
    if shift < 0:
        raise ValueError(f"scale ratio {s_in / s_out} too large for a right shift")
    return RequantParams(multiplier, shift)


def fixed_point_multiply(v: np.ndarray, multiplier: int, shift: int) -> np.ndarray:
    """round_half_away(v * multiplier / 2**shift) in exact int64 arithmetic.

    |v| must stay below 2**31 so the product fits in int64.
    """
    v = np.asarray(v, dtype=np.int64)
    if shift == 0:
        return v * multiplier
    if shift > 62:
        # |v * multiplier| < 2**62 <= 2**(shift - 1): always rounds to zero
        return np.zeros_like(v)
    prod = v * np.int64(multiplier)
    nudge = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(prod) + nudge) >> np.int64(shift)
    return np.where(prod < 0, -mag, mag)
