"""Symmetric quantization and fixed-point arithmetic.

All narrowing conversions saturate, all rounding is half away from zero and
zero-points are fixed at 0. Fixed-point formats used across the engine:

    Q3.12  int16, scale 2^-12, range [-8, 8)   activation inputs, cell state
    Q0.15  int16, scale 2^-15, range [-1, 1)   sigmoid/tanh outputs
    s'     int16, scale 2^-10                  normalized values in integer layer norm
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError

BIT_WIDTHS = (8, 16, 32)
_DTYPES = {8: np.int8, 16: np.int16, 32: np.int32}

Q3_12_FRAC = 12
Q0_15_FRAC = 15
LN_FRAC = 10


def qmax(bit_width: int) -> int:
    return 2 ** (bit_width - 1) - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def saturate(q: np.ndarray, bit_width: int) -> np.ndarray:
    """Clamp to [-(2^(b-1)-1), 2^(b-1)-1] and narrow to the matching dtype."""
    limit = qmax(bit_width)
    return np.clip(np.asarray(q, dtype=np.int64), -limit, limit).astype(_DTYPES[bit_width])


@dataclass(frozen=True)
class QuantParams:
    scale: float
    bit_width: int = 8

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale!r}")
        if self.bit_width not in BIT_WIDTHS:
            raise QuantizationError(
                f"bit width must be one of {BIT_WIDTHS}, got {self.bit_width}"
            )

    @property
    def symmetric(self) -> bool:
        return True

    @property
    def qmax(self) -> int:
        return qmax(self.bit_width)

    @property
    def dtype(self) -> type[np.signedinteger]:
        return _DTYPES[self.bit_width]

    @classmethod
    def from_max_abs(cls, max_abs: float, bit_width: int) -> QuantParams:
        if max_abs == 0:
            return cls(1.0, bit_width)
        return cls(float(max_abs) / qmax(bit_width), bit_width)


Q3_12 = QuantParams(2.0**-Q3_12_FRAC, 16)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        limit = self.params.qmax
        if self.data.size and int(np.max(np.abs(self.data.astype(np.int64)))) > limit:
            raise QuantizationError(
                f"payload exceeds the {self.params.bit_width}-bit symmetric range ±{limit}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def scale(self) -> float:
        return self.params.scale

    @functools.cached_property
    def as_float32(self) -> np.ndarray:
        """The payload as float32, built once; exact for 8- and 16-bit data."""
        data = self.data.astype(np.float32)
        data.setflags(write=False)
        return data


def _check_finite(v: np.ndarray) -> None:
    bad = ~np.isfinite(v)
    if bad.any():
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        where = index[0] if len(index) == 1 else index
        raise QuantizationError(f"non-finite value {v[index]!r} at index {where}")


def quantize_symmetric(v: np.ndarray, bit_width: int = 8) -> QuantizedTensor:
    """Quantize with scale = max|v| / (2^(b-1) - 1); an all-zero input gets scale 1."""
    if bit_width not in (8, 16):
        raise QuantizationError(f"quantize_symmetric supports 8 or 16 bits, got {bit_width}")
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v)
    limit = qmax(bit_width)
    max_abs = float(np.max(np.abs(v))) if v.size else 0.0
    params = QuantParams.from_max_abs(max_abs, bit_width)
    if max_abs == 0:
        return QuantizedTensor(np.zeros(v.shape, dtype=params.dtype), params)
    q = round_half_away(v * limit / max_abs)
    return QuantizedTensor(saturate(q, bit_width), params)


def quantize_with(v: np.ndarray, params: QuantParams) -> QuantizedTensor:
    """Quantize at a fixed, precomputed scale (saturating)."""
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v)
    q = round_half_away(v / params.scale)
    return QuantizedTensor(saturate(q, params.bit_width), params)


def dequantize(t: QuantizedTensor) -> np.ndarray:
    return t.data.astype(np.float64) * t.params.scale


@dataclass(frozen=True)
class Multiplier:
    """Real multiplier stored as value * 2^(shift - 31) with value in [2^30, 2^31)."""

    value: int
    shift: int

    @property
    def real(self) -> float:
        return math.ldexp(self.value, self.shift - 31)


def quantize_multiplier(real: float) -> Multiplier:
    if not (math.isfinite(real) and real > 0):
        raise QuantizationError(f"multiplier must be positive and finite, got {real!r}")
    mantissa, exponent = math.frexp(real)
    value = math.floor(mantissa * 2**31 + 0.5)
    if value == 2**31:
        value //= 2
        exponent += 1
    if not -31 <= exponent <= 30:
        raise QuantizationError(
            f"multiplier {real:.6g} is outside the representable range [2^-32, 2^30)",
            hint="check the calibrated scales feeding this requantization",
        )
    return Multiplier(value, exponent)


def apply_multiplier(
    acc: np.ndarray | int, m: Multiplier, bit_width: int | None = None
) -> np.ndarray:
    """round(acc * m.real), half away from zero, in int64; saturated if bit_width given.

    acc must fit in 32 bits so the 64-bit product cannot overflow.
    """
    acc = np.asarray(acc, dtype=np.int64)
    prod = acc * np.int64(m.value)
    total_shift = 31 - m.shift
    rounding = np.int64(1) << np.int64(total_shift - 1)
    mag = (np.abs(prod) + rounding) >> np.int64(total_shift)
    out = np.where(prod < 0, -mag, mag)
    if bit_width is None:
        return out
    return saturate(out, bit_width)


def rounding_shift(v: np.ndarray | int, n: int) -> np.ndarray:
    """v / 2^n rounded half away from zero, in int64."""
    v = np.asarray(v, dtype=np.int64)
    mag = (np.abs(v) + (np.int64(1) << np.int64(n - 1))) >> np.int64(n)
    return np.where(v < 0, -mag, mag)


def requantize(acc: np.ndarray | int, in_scale: float, out: QuantParams) -> np.ndarray | int:
    """Move an accumulator from in_scale to out's scale, saturating to out.bit_width."""
    if not in_scale > 0:
        raise QuantizationError(f"input scale must be positive, got {in_scale!r}")
    result = apply_multiplier(acc, quantize_multiplier(in_scale / out.scale), out.bit_width)
    if np.ndim(acc) == 0:
        return int(result)
    return result


@functools.cache
def _activation_table(kind: str) -> np.ndarray:
    # Non-negative Q3.12 inputs 0..32768; negative inputs use the function's symmetry.
    x = np.arange(0, 2**15 + 1, dtype=np.float64) / 2**Q3_12_FRAC
    y = 1.0 / (1.0 + np.exp(-x)) if kind == "sigmoid" else np.tanh(x)
    table = round_half_away(y * 2**Q0_15_FRAC).astype(np.int64)
    if kind == "sigmoid":
        # the tail within 2^-10 of 1.0 reads as full scale, keeping the error under 2^-9
        table[y >= 1.0 - 2.0**-10] = qmax(16)
    table = np.minimum(table, qmax(16))
    table.setflags(write=False)
    return table


def fixed_sigmoid(q: np.ndarray | int) -> np.ndarray:
    """Sigmoid from Q3.12 to Q0.15 by table lookup; σ(-x) is read as 1 - σ(x)."""
    q = np.asarray(q, dtype=np.int64)
    pos = _activation_table("sigmoid")[np.abs(q)]
    return np.where(q >= 0, pos, 2**Q0_15_FRAC - pos).astype(np.int16)


def fixed_tanh(q: np.ndarray | int) -> np.ndarray:
    """Tanh from Q3.12 to Q0.15 by table lookup; odd by construction."""
    q = np.asarray(q, dtype=np.int64)
    pos = _activation_table("tanh")[np.abs(q)]
    return np.where(q >= 0, pos, -pos).astype(np.int16)
