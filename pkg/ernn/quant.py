"""Hybrid and integer-only execution of the recurrent cells.

Hybrid: 8-bit weights and matmuls, activations quantized per call, everything
else in float. Integer: every tensor is an integer with a scale fixed at
conversion time; matmuls are int8 x int8 -> int32, layer norm runs on 16-bit
inputs, sigmoid/tanh take Q3.12 and return Q0.15, the cell state is Q3.12.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blocksparse import MAX_QUANTIZED_COLS, BlockSparseMatrix, matvec_quantized
from .cells import (
    CellKind,
    CellState,
    FloatCellWeights,
    Matrix,
    Observer,
    SruWeights,
    calibrated_gates,
    cell_step,
)
from .errors import CalibrationError, NumericError, QuantizationError, ShapeError
from .fixedpoint import (
    LN_FRAC,
    Q0_15_FRAC,
    Q3_12,
    Q3_12_FRAC,
    Multiplier,
    QuantizedTensor,
    QuantParams,
    apply_multiplier,
    dequantize,
    fixed_sigmoid,
    fixed_tanh,
    quantize_multiplier,
    quantize_symmetric,
    quantize_with,
    rounding_shift,
    saturate,
)

logger = logging.getLogger(__name__)

QuantMatrix = QuantizedTensor | BlockSparseMatrix

ONE_Q15 = 1 << Q0_15_FRAC


def quantize_matrix(w: Matrix | QuantMatrix) -> QuantMatrix:
    """Per-tensor 8-bit weights; block-sparse matrices keep their ledger."""
    if isinstance(w, BlockSparseMatrix):
        return w if w.is_quantized else w.quantized()
    if isinstance(w, QuantizedTensor):
        return w
    if w.shape[1] > MAX_QUANTIZED_COLS:
        raise QuantizationError(
            f"{w.shape[1]} columns overflow the int32 accumulator guarantee (at most {MAX_QUANTIZED_COLS})"
        )
    return quantize_symmetric(w, 8)


def matrix_params(w: QuantMatrix) -> QuantParams:
    return w.params  # type: ignore[return-value]


# int8 x int8 partial sums over this many columns stay within 2^24, so a float32 GEMV is exact
EXACT_F32_COLS = 2**24 // 128**2


def prepare_kernel(w: QuantMatrix) -> None:
    """Build the cached float payload the matmul kernels read."""
    if isinstance(w, BlockSparseMatrix):
        w.kernel_data
    else:
        w.as_float32


def int_matvec(w: QuantMatrix, x: QuantizedTensor) -> np.ndarray:
    """Integer-exact int8 x int8 product as int64 accumulators (scale s_W * s_x)."""
    if isinstance(w, BlockSparseMatrix):
        return matvec_quantized(w, x).astype(np.int64)
    if x.params.bit_width != 8:
        raise QuantizationError(f"expected an 8-bit input, got {x.params.bit_width}-bit")
    if x.data.shape != (w.shape[1],):
        raise ShapeError(f"input length {x.data.shape} does not match {w.shape[1]} columns")
    a = w.as_float32
    v = x.data.astype(np.float32)
    acc = np.zeros(a.shape[0], dtype=np.int64)
    for start in range(0, a.shape[1], EXACT_F32_COLS):
        stop = start + EXACT_F32_COLS
        acc += (a[:, start:stop] @ v[start:stop]).astype(np.int64)
    return acc


# Hybrid


def hybrid_matvec(w: QuantMatrix, x: np.ndarray) -> np.ndarray:
    """y = W x with x quantized on the fly at s_x = max|x| / 127."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input to an 8-bit matmul")
    xq = quantize_symmetric(x, 8)
    acc = int_matvec(w, xq)
    return acc * (matrix_params(w).scale * xq.params.scale)


@dataclass(frozen=True, eq=False)
class HybridCellWeights:
    """A float cell whose matrices are all 8-bit; biases and layer norm stay float."""

    cell: FloatCellWeights

    def __post_init__(self) -> None:
        matrices = [*self.cell.W.values(), *getattr(self.cell, "R", {}).values(), self.cell.W_proj]
        if not all(isinstance(m, QuantizedTensor) or getattr(m, "is_quantized", False) for m in matrices):
            raise QuantizationError("hybrid cells need every matrix in 8-bit form")
        for m in matrices:
            prepare_kernel(m)

    @property
    def kind(self) -> CellKind:
        return self.cell.kind

    @property
    def input_width(self) -> int:
        return self.cell.input_width

    @property
    def output_width(self) -> int:
        return self.cell.output_width

    def initial_state(self) -> CellState:
        return self.cell.initial_state()


def hybrid_cell(w: FloatCellWeights) -> HybridCellWeights:
    changes: dict[str, object] = {
        "W": {g: quantize_matrix(m) for g, m in w.W.items()},
        "W_proj": quantize_matrix(w.W_proj),
    }
    if not isinstance(w, SruWeights):
        changes["R"] = {g: quantize_matrix(m) for g, m in w.R.items()}
    return HybridCellWeights(replace(w, **changes))


def hybrid_cell_step(
    w: HybridCellWeights,
    x: np.ndarray,
    s: CellState,
    *,
    observe: Observer | None = None,
) -> tuple[np.ndarray, CellState]:
    return cell_step(w.cell, x, s, matvec=hybrid_matvec, observe=observe)


cell_step.register(HybridCellWeights, hybrid_cell_step)


# Integer


def _div_round(num: int, den: int) -> int:
    mag = (2 * abs(num) + den) // (2 * den)
    return -mag if num < 0 else mag


def _div_round_array(num: np.ndarray, den: int) -> np.ndarray:
    num = np.asarray(num, dtype=np.int64)
    mag = (2 * np.abs(num) + den) // (2 * den)
    return np.where(num < 0, -mag, mag)


def ln_bias_params(gain: QuantParams) -> QuantParams:
    return QuantParams(math.ldexp(gain.scale, -LN_FRAC), 32)


def integer_layer_norm(q: np.ndarray, gain: QuantizedTensor, bias: QuantizedTensor) -> np.ndarray:
    """Layer norm on a 16-bit vector; the result is 16-bit at the gain's scale.

    The mean and standard deviation carry 2^10 extra resolution so the
    normalized value q' keeps scale 2^-10 instead of collapsing to a handful of
    integer levels. Zero variance gives q' = 0.
    """
    if bias.scale != math.ldexp(gain.scale, -LN_FRAC):
        raise QuantizationError(
            f"layer-norm bias scale {bias.scale!r} must be 2^-10 x gain scale {gain.scale!r}"
        )
    q = np.asarray(q, dtype=np.int64)
    n = q.size
    s1 = int(q.sum())
    s2 = int((q * q).sum())
    mean = _div_round(s1 << LN_FRAC, n)
    # sum((2^10 q - mean)^2) expanded so the scalars stay exact
    spread = (s2 << (2 * LN_FRAC)) - 2 * mean * (s1 << LN_FRAC) + n * mean * mean
    var = max(spread, 0) // n
    std = math.isqrt(var << (2 * LN_FRAC))
    if std == 0:
        normalized = np.zeros(n, dtype=np.int64)
    else:
        normalized = _div_round_array(((q << LN_FRAC) - mean) << (2 * LN_FRAC), std)
    out = rounding_shift(normalized * gain.data.astype(np.int64) + bias.data.astype(np.int64), LN_FRAC)
    return saturate(out, 16)


@dataclass
class IntegerCellState:
    c: np.ndarray  # int16, Q3.12
    h: np.ndarray  # int8 at the layer's output scale


def _ratio(name: str, real: float) -> Multiplier:
    try:
        return quantize_multiplier(real)
    except QuantizationError as e:
        raise QuantizationError(f"{name}: {e.message}", hint=e.hint) from e


@dataclass(frozen=True, eq=False)
class IntegerCellWeights:
    """All tensors and calibrated scales of one integer layer.

    Biases are 32-bit: at 2^-10 x s_gain for gates with layer norm (cell bias and
    layer-norm bias fused), at the calibrated pre-activation scale otherwise, and
    at s_W x s_input for the SRU's linear branches.
    """

    kind: CellKind
    W: dict[str, QuantMatrix]
    R: dict[str, QuantMatrix]
    b: dict[str, QuantizedTensor]
    ln_gain: dict[str, QuantizedTensor]
    W_proj: QuantMatrix
    input: QuantParams
    output: QuantParams
    pre: dict[str, QuantParams]
    m: QuantParams
    ln_c_bias: QuantizedTensor | None = None
    cell_clip: float | None = None
    multipliers: dict[str, Multiplier] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        missing = [f"gate.{g}.pre" for g in calibrated_gates(self.kind) if g not in self.pre]
        if missing:
            raise CalibrationError("missing calibration scales", missing)
        for name, p in (("input", self.input), ("output", self.output), ("m", self.m)):
            if p.bit_width != 8:
                raise QuantizationError(f"{name} must be 8-bit, got {p.bit_width}-bit")
        object.__setattr__(self, "multipliers", self._build_multipliers())
        for m in [*self.W.values(), *self.R.values(), self.W_proj]:
            prepare_kernel(m)

    def _build_multipliers(self) -> dict[str, Multiplier]:
        mults = {}
        for g in calibrated_gates(self.kind):
            pre = self.pre[g]
            mults[f"{g}.W"] = _ratio(f"gate {g} input", matrix_params(self.W[g]).scale * self.input.scale / pre.scale)
            if g in self.R:
                mults[f"{g}.R"] = _ratio(
                    f"gate {g} recurrent", matrix_params(self.R[g]).scale * self.output.scale / pre.scale
                )
            gain = self.ln_gain.get(g)
            expected = ln_bias_params(gain.params) if gain is not None else QuantParams(pre.scale, 32)
            if self.b[g].params != expected:
                raise QuantizationError(f"bias of gate {g} has scale {self.b[g].scale!r}, expected {expected.scale!r}")
            act_scale = gain.scale if gain is not None else pre.scale
            mults[f"{g}.act"] = _ratio(f"gate {g} activation", act_scale / Q3_12.scale)
        if self.kind is CellKind.SRU:
            for g in ("x1", "x2"):
                acc_scale = matrix_params(self.W[g]).scale * self.input.scale
                if self.b[g].scale != acc_scale:
                    raise QuantizationError(f"bias of branch {g} must sit at the accumulator scale")
                mults[g] = _ratio(f"branch {g}", acc_scale / Q3_12.scale)
            if "c" in self.ln_gain:
                mults["c.act"] = _ratio("cell layer norm", self.ln_gain["c"].scale / Q3_12.scale)
            m_frac = Q3_12_FRAC + Q0_15_FRAC
        else:
            m_frac = Q0_15_FRAC
        mults["m"] = _ratio("cell output", math.ldexp(1.0, -m_frac) / self.m.scale)
        mults["proj"] = _ratio("projection", matrix_params(self.W_proj).scale * self.m.scale / self.output.scale)
        return mults

    @property
    def input_width(self) -> int:
        return self.W[calibrated_gates(self.kind)[0]].shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W[calibrated_gates(self.kind)[0]].shape[0]

    @property
    def output_width(self) -> int:
        return self.W_proj.shape[0]

    @property
    def clip_q12(self) -> int | None:
        if self.cell_clip is None:
            return None
        return min(int(round(self.cell_clip * 2**Q3_12_FRAC)), Q3_12.qmax)

    def initial_state(self) -> IntegerCellState:
        return IntegerCellState(
            np.zeros(self.hidden_width, dtype=np.int16), np.zeros(self.output_width, dtype=np.int8)
        )


def _gate_q12(w: IntegerCellWeights, g: str, x: QuantizedTensor, h: QuantizedTensor | None) -> np.ndarray:
    acc = apply_multiplier(int_matvec(w.W[g], x), w.multipliers[f"{g}.W"])
    if h is not None and g in w.R:
        acc = acc + apply_multiplier(int_matvec(w.R[g], h), w.multipliers[f"{g}.R"])
    gain = w.ln_gain.get(g)
    if gain is None:
        pre = saturate(acc + w.b[g].data.astype(np.int64), 16)
    else:
        pre = integer_layer_norm(saturate(acc, 16), gain, w.b[g])
    return apply_multiplier(pre, w.multipliers[f"{g}.act"], 16)


def _clip_cell(c: np.ndarray, limit: int | None) -> np.ndarray:
    c = saturate(c, 16)
    return c if limit is None else np.clip(c, -limit, limit).astype(np.int16)


def _emit(observe: Observer | None, name: str, value: np.ndarray) -> None:
    if observe is not None:
        observe(name, value)


def integer_cell_step(
    w: IntegerCellWeights,
    x: QuantizedTensor,
    s: IntegerCellState,
    *,
    observe: Observer | None = None,
) -> tuple[QuantizedTensor, IntegerCellState]:
    if x.params != w.input:
        raise QuantizationError(f"input scale {x.scale!r} does not match the layer's {w.input.scale!r}")
    h_prev = QuantizedTensor(s.h, w.output)
    c_prev = s.c.astype(np.int64)

    if w.kind is CellKind.SRU:
        f = fixed_sigmoid(_gate_q12(w, "f", x, None)).astype(np.int64)
        r = fixed_sigmoid(_gate_q12(w, "r", x, None)).astype(np.int64)
        x1, x2 = (
            apply_multiplier(int_matvec(w.W[g], x) + w.b[g].data.astype(np.int64), w.multipliers[g], 16)
            .astype(np.int64)
            for g in ("x1", "x2")
        )
        c = _clip_cell(rounding_shift(f * c_prev + (ONE_Q15 - f) * x1, Q0_15_FRAC), w.clip_q12)
        if "c" in w.ln_gain:
            normed = integer_layer_norm(c, w.ln_gain["c"], w.ln_c_bias)  # type: ignore[arg-type]
            c_act = apply_multiplier(normed, w.multipliers["c.act"], 16)
        else:
            c_act = c
        t = fixed_tanh(c_act).astype(np.int64)
        # r * tanh is Q0.30, (1 - r) * x2 is Q3.27: combine at Q3.27
        m_wide = rounding_shift(r * t, Q0_15_FRAC - Q3_12_FRAC) + (ONE_Q15 - r) * x2
    else:
        f = fixed_sigmoid(_gate_q12(w, "f", x, h_prev)).astype(np.int64)
        i = ONE_Q15 - f if w.kind is CellKind.CIFG else fixed_sigmoid(_gate_q12(w, "i", x, h_prev)).astype(np.int64)
        z = fixed_tanh(_gate_q12(w, "z", x, h_prev)).astype(np.int64)
        o = fixed_sigmoid(_gate_q12(w, "o", x, h_prev)).astype(np.int64)
        # i*z is Q0.30 and f*c is Q3.27; both land on Q3.12
        c = _clip_cell(
            rounding_shift(i * z, 2 * Q0_15_FRAC - Q3_12_FRAC) + rounding_shift(f * c_prev, Q0_15_FRAC),
            w.clip_q12,
        )
        m_wide = rounding_shift(o * fixed_tanh(c).astype(np.int64), Q0_15_FRAC)

    m = QuantizedTensor(apply_multiplier(m_wide, w.multipliers["m"], 8), w.m)
    h = apply_multiplier(int_matvec(w.W_proj, m), w.multipliers["proj"], 8)
    _emit(observe, "cell", c.astype(np.float64) * Q3_12.scale)
    _emit(observe, "m", dequantize(m))
    _emit(observe, "output", h.astype(np.float64) * w.output.scale)
    return QuantizedTensor(h, w.output), IntegerCellState(c, h)


cell_step.register(IntegerCellWeights, integer_cell_step)


def integer_cell(
    w: FloatCellWeights,
    *,
    input: QuantParams,
    output: QuantParams,
    pre: dict[str, QuantParams],
    m: QuantParams,
) -> IntegerCellWeights:
    """Quantize one float cell against its calibrated activation scales."""
    missing = [f"gate.{g}.pre" for g in calibrated_gates(w.kind) if g not in pre]
    if missing:
        raise CalibrationError("missing calibration scales", missing)
    W = {g: quantize_matrix(mat) for g, mat in w.W.items()}
    R = {} if isinstance(w, SruWeights) else {g: quantize_matrix(mat) for g, mat in w.R.items()}
    b: dict[str, QuantizedTensor] = {}
    gains: dict[str, QuantizedTensor] = {}
    for g in calibrated_gates(w.kind):
        ln = w.ln[g]
        if ln.enabled:
            gains[g] = quantize_symmetric(ln.gain, 8)
            b[g] = quantize_with(np.asarray(ln.bias, np.float64) + w.b[g], ln_bias_params(gains[g].params))
        else:
            b[g] = quantize_with(w.b[g], QuantParams(pre[g].scale, 32))
    ln_c_bias = None
    if isinstance(w, SruWeights):
        for g in ("x1", "x2"):
            b[g] = quantize_with(w.b[g], QuantParams(matrix_params(W[g]).scale * input.scale, 32))
        if w.ln["c"].enabled:
            gains["c"] = quantize_symmetric(w.ln["c"].gain, 8)
            ln_c_bias = quantize_with(w.ln["c"].bias, ln_bias_params(gains["c"].params))
    return IntegerCellWeights(
        kind=w.kind,
        W=W,
        R=R,
        b=b,
        ln_gain=gains,
        W_proj=quantize_matrix(w.W_proj),
        input=input,
        output=output,
        pre={g: pre[g] for g in calibrated_gates(w.kind)},
        m=m,
        ln_c_bias=ln_c_bias,
        cell_clip=w.cell_clip,
    )
